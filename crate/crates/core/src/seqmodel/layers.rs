//! Recurrent and convolutional building blocks over graph handles.

use super::{SeqModelError, KERNEL_WIDTHS};
use crate::autodiff::{Graph, Tensor, Var};
use crate::corpus::TokenId;

type Result<T> = std::result::Result<T, SeqModelError>;

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: Var,
    pub b: Var,
}

impl Linear {
    pub fn apply(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        Ok(g.affine(x, self.w, self.b)?)
    }
}

/// Gate order in each array is update `z`, reset `r`, candidate `h`.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w: [Var; 3],
    pub u: [Var; 3],
    pub b: [Var; 3],
}

impl GruVars {
    pub fn hidden(&self, g: &Graph<'_>) -> usize {
        g.value(self.u[0]).cols()
    }
}

/// One step given the input projections `x W + b` for each gate.
fn gru_projected(g: &mut Graph<'_>, xz: Var, xr: Var, xh: Var, h: Var, p: &GruVars) -> Result<Var> {
    let hz = g.matmul(h, p.u[0])?;
    let z = g.add(xz, hz)?;
    let z = g.sigmoid(z)?;
    let hr = g.matmul(h, p.u[1])?;
    let r = g.add(xr, hr)?;
    let r = g.sigmoid(r)?;
    let rh = g.mul(r, h)?;
    let hh = g.matmul(rh, p.u[2])?;
    let c = g.add(xh, hh)?;
    let c = g.tanh(c)?;
    // (1 - z) h + z c, written as h + z (c - h)
    let d = g.sub(c, h)?;
    let zd = g.mul(z, d)?;
    Ok(g.add(h, zd)?)
}

/// `h' = (1 - z) h + z tanh(x Wh + (r h) Uh + bh)` with sigmoid gates
/// `z = s(x Wz + h Uz + bz)`, `r = s(x Wr + h Ur + br)`. `x` and `h` are rows.
pub fn gru_cell(g: &mut Graph<'_>, x: Var, h: Var, p: &GruVars) -> Result<Var> {
    let xz = g.affine(x, p.w[0], p.b[0])?;
    let xr = g.affine(x, p.w[1], p.b[1])?;
    let xh = g.affine(x, p.w[2], p.b[2])?;
    gru_projected(g, xz, xr, xh, h, p)
}

/// Run a GRU from a zero state over the rows of `xs`, right to left when
/// `reverse`. States are returned in position order.
pub fn run_gru(g: &mut Graph<'_>, xs: Var, p: &GruVars, reverse: bool) -> Result<Vec<Var>> {
    let len = g.value(xs).rows();
    if len == 0 {
        return Err(SeqModelError::EmptyInput("gru"));
    }
    let hidden = p.hidden(g);
    let proj: Vec<Var> = (0..3)
        .map(|k| g.affine(xs, p.w[k], p.b[k]))
        .collect::<std::result::Result<_, _>>()?;
    let mut h = g.constant(Tensor::zeros(&[1, hidden]));
    let mut states = vec![h; len];
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..len).rev())
    } else {
        Box::new(0..len)
    };
    for i in order {
        let xz = g.row(proj[0], i)?;
        let xr = g.row(proj[1], i)?;
        let xh = g.row(proj[2], i)?;
        h = gru_projected(g, xz, xr, xh, h, p)?;
        states[i] = h;
    }
    Ok(states)
}

pub struct BiLayerOutput {
    /// `L x 2h`: forward state then backward state per position.
    pub states: Var,
    /// Forward state after the last position.
    pub last_forward: Var,
    /// Backward state after the first position.
    pub last_backward: Var,
}

pub fn bigru_layer(g: &mut Graph<'_>, xs: Var, fwd: &GruVars, bwd: &GruVars) -> Result<BiLayerOutput> {
    let f = run_gru(g, xs, fwd, false)?;
    let b = run_gru(g, xs, bwd, true)?;
    let fm = g.concat(&f, 0)?;
    let bm = g.concat(&b, 0)?;
    Ok(BiLayerOutput {
        states: g.concat(&[fm, bm], 1)?,
        last_forward: *f.last().expect("non-empty"),
        last_backward: b[0],
    })
}

fn stacked_bigru(g: &mut Graph<'_>, xs: Var, layers: &[(GruVars, GruVars)]) -> Result<BiLayerOutput> {
    let mut input = xs;
    let mut out = None;
    for (fwd, bwd) in layers {
        let o = bigru_layer(g, input, fwd, bwd)?;
        input = o.states;
        out = Some(o);
    }
    out.ok_or(SeqModelError::EmptyInput("bidirectional encoder layers"))
}

fn embed(g: &mut Graph<'_>, embedding: Var, ids: &[TokenId], what: &'static str) -> Result<Var> {
    if ids.is_empty() {
        return Err(SeqModelError::EmptyInput(what));
    }
    let vocab = g.value(embedding).rows();
    if let Some(&id) = ids.iter().find(|&&id| id >= vocab) {
        return Err(SeqModelError::TokenRange { id, vocab });
    }
    Ok(g.gather_rows(embedding, ids)?)
}

/// `L x h` context states: stacked bidirectional GRU, then a linear
/// projection of each `2h` position state down to `h`.
pub fn encode_context(
    g: &mut Graph<'_>,
    ids: &[TokenId],
    embedding: Var,
    layers: &[(GruVars, GruVars)],
    proj: &Linear,
) -> Result<Var> {
    let xs = embed(g, embedding, ids, "context")?;
    let out = stacked_bigru(g, xs, layers)?;
    proj.apply(g, out.states)
}

/// `1 x 2h` summary of a response: final forward and final backward
/// top-layer states side by side.
pub fn encode_response(
    g: &mut Graph<'_>,
    ids: &[TokenId],
    embedding: Var,
    layers: &[(GruVars, GruVars)],
) -> Result<Var> {
    let xs = embed(g, embedding, ids, "response")?;
    let out = stacked_bigru(g, xs, layers)?;
    Ok(g.concat(&[out.last_forward, out.last_backward], 1)?)
}

/// Row offsets covered by a same-padded window of width `k`: `k = 2` reads
/// the current and next position, `k = 3` is centred.
fn window_offsets(k: usize) -> impl Iterator<Item = isize> {
    let lo = -(((k - 1) / 2) as isize);
    lo..lo + k as isize
}

/// `L x h` fact states: same-padded convolutions of each width over the
/// embeddings, tanh, concatenated and projected to `h`.
pub fn encode_facts(
    g: &mut Graph<'_>,
    ids: &[TokenId],
    embedding: Var,
    convs: &[Linear],
    proj: &Linear,
) -> Result<Var> {
    let xs = embed(g, embedding, ids, "fact")?;
    let mut maps = Vec::with_capacity(convs.len());
    for (conv, k) in convs.iter().zip(KERNEL_WIDTHS) {
        let windows = window_offsets(k)
            .map(|off| if off == 0 { Ok(xs) } else { g.shift_rows(xs, off) })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let stacked = if windows.len() == 1 {
            windows[0]
        } else {
            g.concat(&windows, 1)?
        };
        let a = conv.apply(g, stacked)?;
        maps.push(g.tanh(a)?);
    }
    let features = g.concat(&maps, 1)?;
    proj.apply(g, features)
}

/// Initial decoder state per layer: `tanh(mean(H_C) W_l + b_l [+ extra])`.
pub fn decoder_init(g: &mut Graph<'_>, context: Var, inits: &[Linear], extra: Option<Var>) -> Result<Vec<Var>> {
    let mean = g.mean(context, 0)?;
    inits
        .iter()
        .map(|lin| {
            let mut a = lin.apply(g, mean)?;
            if let Some(e) = extra {
                a = g.add(a, e)?;
            }
            Ok(g.tanh(a)?)
        })
        .collect()
}

"""Writes conversations.tsv and facts.tsv for the 50-conversation fixture.

Each conversation i has eight replies u1..u8 under a root that names a
unique subject. Only the first fact of the conversation shares words with
the utterances, so it is always the top-ranked fact. Survivors:
  u1   overlaps the fact (subject word)                       every i   -> 50
  u3   overlaps but is 22 tokens long (length filter)          never
  u4   20 tokens mentioning the place, when i % 10 == 0       5 of 50  -> 5
  u8   names the person, when i % 25 == 0                      2 of 50  -> 2
  all other replies share no content word with the fact
Expected kept: 57 of 400 candidates; 50 dropped by length, 293 by knowledge.
"""

SUBJECTS = """lighthouse glacier volcano cathedral submarine telescope violin pyramid canal
locomotive orchid penguin meteorite tapestry harpsichord zeppelin aqueduct sequoia octopus
sundial carousel observatory windmill lagoon monastery armadillo typewriter gondola tornado
saxophone chandelier compass dinosaur fjord geyser hieroglyph iceberg jellyfish kayak lantern
mammoth nebula origami porcupine quasar reindeer scarab trombone parasol walrus""".split()

PLACES = """lisbon oslo kyoto lima cairo quito dublin tallinn hanoi accra bergen porto
zagreb tbilisi cusco muscat riga vilnius seville krakow antwerp lyon geneva bruges
salzburg valletta split ghent turku tromso nara hue sucre arequipa cordoba rosario
mendoza bilbao granada malaga toledo perugia verona ravenna siena lucca pisa parma
modena trieste""".split()

PERSONS = """abernathy blackwood castellano dunmore eastwick fairbanks galloway hawthorne
ingersoll jarrow kingsley lockhart merriweather norcross oakley pemberton quimby
radcliffe stanhope thornbury underhill vantongeren whitlock yardley zimmerman ashdown
bramwell carrington delacroix ellsworth fitzroy greaves holloway islington jessup
kensington langley montague northcote ormsby prescott quarles rutherford sinclair
tennyson upton vickers wadsworth winslow youngblood""".split()

assert len(SUBJECTS) == len(PLACES) == len(PERSONS) == 50
assert len(set(SUBJECTS + PLACES + PERSONS)) == 150

conv_lines, fact_lines = [], []
for i, (subj, place, person) in enumerate(zip(SUBJECTS, PLACES, PERSONS)):
    cid = f"c{i:02d}"
    fact = f"{subj} facts : the {subj} was first documented near {place} by {person} ."
    if i % 9 == 0:
        fact += " background" * 600
    fact_lines += [
        f"{cid}\t{fact}",
        f"{cid}\tledger entries record shipping tariffs and harbor fees .",
        f"{cid}\tcommittee minutes discuss budget allocations for road repairs .",
    ]
    root = f"today i learned about the {subj} near {place}"
    if i % 7 == 0:
        root = "honestly " * 110 + root
    u4 = f"i visited {place} once" + " wow" * 16 if i % 10 == 0 else "nice one"
    u8 = f"{person} deserves credit" if i % 25 == 0 else "great thread everyone"
    utts = [
        ("u0", "-", root),
        ("u1", "u0", f"that {subj} story is amazing"),
        ("u2", "u0", "sounds fun , i agree totally"),
        ("u3", "u1", f"the {subj}" + " wow" * 20),
        ("u4", "u1", u4),
        ("u5", "u2", "haha yes"),
        ("u6", "u5", "weird but funny"),
        ("u7", "u4", "cool cool cool"),
        ("u8", "u0", u8),
    ]
    conv_lines += [f"{cid}\t{u}\t{p}\t{t}" for u, p, t in utts]

with open("conversations.tsv", "w") as f:
    f.write("\n".join(conv_lines) + "\n")
with open("facts.tsv", "w") as f:
    f.write("\n".join(fact_lines) + "\n")

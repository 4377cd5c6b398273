"""Regenerates the demo corpora and substitution tables.

Two domains: "formal" (bureaucratic register) and "plain" (everyday
register). Each formal word has exactly one plain counterpart, the
roundtrip mock swaps formal words for plain ones, and the rulebook
generator swaps them back.

    python3 make_demo.py
"""

import random

SWAPS = [
    ("individuals", "people"),
    ("shall", "must"),
    ("remit", "pay"),
    ("obtain", "get"),
    ("commence", "start"),
    ("terminate", "end"),
    ("assist", "help"),
    ("request", "ask"),
    ("sufficient", "enough"),
    ("purchase", "buy"),
    ("reside", "live"),
    ("approximately", "about"),
    ("additional", "more"),
    ("utilize", "use"),
    ("endeavor", "try"),
    ("inform", "tell"),
    ("require", "need"),
    ("residence", "home"),
    ("employment", "job"),
    ("physician", "doctor"),
    ("vehicle", "car"),
    ("currently", "now"),
    ("demonstrate", "show"),
]

SUBJECTS = ["Applicants", "Residents", "Tenants", "Members", "Employees", "Students", "Owners", "Visitors"]
PLACES = ["the county office", "the city hall", "the main branch", "the front desk", "the regional center"]
TIMES = ["before the deadline", "within ten days", "by the close of the month", "each quarter", "on the first Monday"]
THINGS = ["the form", "the permit", "the fee", "the renewal notice", "the application", "the receipt"]

TEMPLATES = [
    "{S} shall remit {T} to {P} {W}.",
    "{S} who reside in the district shall obtain {T} {W}.",
    "{S} may request additional copies of {T} at {P}.",
    "Staff at {P} will assist individuals who require guidance with {T}.",
    "{S} should inform {P} if their residence changes {W}.",
    "The review will commence {W} and terminate approximately two weeks later.",
    "{S} shall demonstrate sufficient income to purchase {T}.",
    "{S} who currently utilize a vehicle for employment shall inform {P}.",
    "A physician shall demonstrate that {T} is sufficient for {S_l}.",
    "{S} should endeavor to obtain {T} {W}.",
    "Individuals seeking employment may request assistance at {P}.",
    "{S} shall utilize {T} to purchase additional permits {W}.",
    "{S} who reside outside the county require {T} {W}.",
    "The office will inform individuals when processing of {T} shall commence.",
    "{S} currently require approximately three days to obtain {T}.",
]


def fill(rng, template):
    s = rng.choice(SUBJECTS)
    return template.format(
        S=s,
        S_l=s.lower(),
        T=rng.choice(THINGS),
        P=rng.choice(PLACES),
        W=rng.choice(TIMES),
    )


def to_plain(sentence, table):
    out = []
    for token in sentence.split(" "):
        core = token.rstrip(".,")
        tail = token[len(core):]
        low = core.lower()
        if low in table:
            rep = table[low]
            if core[0].isupper():
                rep = rep[0].upper() + rep[1:]
            out.append(rep + tail)
        else:
            out.append(token)
    return " ".join(out)


def unique_sentences(rng, n):
    seen = []
    used = set()
    while len(seen) < n:
        s = fill(rng, rng.choice(TEMPLATES))
        if s not in used:
            used.add(s)
            seen.append(s)
    return seen


def write_paragraphs(path, sentences):
    with open(path, "w", encoding="utf-8") as f:
        for i in range(0, len(sentences), 5):
            f.write(" ".join(sentences[i:i + 5]) + "\n\n")


def main():
    rng = random.Random(20240501)
    table = dict(SWAPS)
    formal = unique_sentences(rng, 250)
    # The plain corpus is written independently, then rendered in plain words.
    plain = [to_plain(s, table) for s in unique_sentences(random.Random(7), 250)]
    write_paragraphs("formal.txt", formal)
    write_paragraphs("plain.txt", plain)
    with open("formal_to_plain.tsv", "w", encoding="utf-8") as f:
        for a, b in SWAPS:
            f.write(f"{a}\t{b}\n")
    with open("plain_to_formal.tsv", "w", encoding="utf-8") as f:
        for a, b in SWAPS:
            f.write(f"{b}\t{a}\n")


if __name__ == "__main__":
    main()

#!/usr/bin/env python3
"""Generate the bundled toy data under data/toy/.

Everything is synthetic legal-style English produced from templates, so the
output carries no third-party text. The generator is deterministic.

Outputs:
  corpus.txt          ~1 MB language-model corpus, one document per line
  clf_binary.jsonl    500 examples; the label depends only on the verb
  clf_overfit.jsonl   64 examples for the overfitting check
  clf_multilabel.jsonl  small multi-label fixture
  ideal_predictions.jsonl  scores that rank every gold label of the
                           multi-label fixture first
"""

import argparse
import json
import random
from pathlib import Path

# Verbs used when a court states its reasoning. In the corpus they are always
# followed by a "that"-clause.
REASONING = """considers finds concludes determines holds observes notes accepts
rejects recalls emphasises reiterates acknowledges infers deduces maintains
affirms doubts recognises understands believes agrees confirms establishes
decides declares interprets construes weighs assesses evaluates examines
analyses reasons stresses underlines presumes supposes judges deems
perceives realises admits concedes contends asserts""".split()

# Verbs used for procedural events. In the corpus they are always followed by
# a document and a date.
PROCEDURAL = """files lodges transmits serves delivers forwards dispatches mails
circulates schedules convenes adjourns registers receives notifies invites
encloses attaches uploads translates pays deposits transfers signs executes
stamps indexes archives prints issues sends returns postpones reschedules
withdraws amends resubmits distributes photocopies collects retrieves stores
catalogues numbers binds seals certifies couriers faxes emails""".split()

REASONING = sorted(set(REASONING))
PROCEDURAL = sorted(set(PROCEDURAL) - set(REASONING))

BODIES = ["the Tribunal", "the Court", "the Panel", "the Chamber", "the Arbitral Tribunal",
          "the Committee", "the Board of Appeal", "the Grand Chamber"]
PARTIES = ["the Claimant", "the Respondent", "the Applicant", "the Government",
           "the Investor", "the Commission", "the Secretariat", "the Registry",
           "counsel for the Claimant", "counsel for the Respondent", "the intervener"]
DOCS = ["memorial", "counter-memorial", "reply", "rejoinder", "request for arbitration",
        "notice of appeal", "statement of defence", "witness statement", "expert report",
        "procedural order", "bundle of exhibits", "letter", "application", "power of attorney",
        "list of authorities", "hearing transcript", "request for documents", "costs submission"]
OFFICES = ["the Registry", "the Secretariat", "the President", "the Tribunal", "the other party",
           "the appointing authority", "the Clerk", "the depositary"]
NOUNS = ["measure", "expropriation", "claim", "objection", "treaty", "contract", "investment",
         "provision", "obligation", "standard", "regulation", "directive", "decision",
         "interference", "restriction", "award", "jurisdiction", "admissibility", "remedy",
         "compensation", "breach", "legitimate expectation", "dispute", "exception"]
PREDICATES = ["was not arbitrary", "falls within its jurisdiction", "constitutes an indirect expropriation",
              "did not breach the fair and equitable treatment standard", "must be dismissed",
              "is admissible", "was proportionate to the aim pursued", "lacks a legal basis",
              "cannot be attributed to the State", "is well founded", "was adopted in good faith",
              "does not amount to a denial of justice", "is time-barred", "was discriminatory",
              "pursued a legitimate public purpose", "is manifestly without legal merit",
              "was necessary in a democratic society", "requires no further examination"]
MONTHS = ["January", "February", "March", "April", "May", "June", "July", "August",
          "September", "October", "November", "December"]
TREATIES = ["the Treaty", "the Convention", "the Energy Charter Treaty", "the Agreement",
            "the Bilateral Investment Treaty", "the Charter", "the Protocol"]
SUBJECTS = ["the free movement of goods", "the protection of personal data", "public procurement",
            "State aid", "the right to a fair trial", "freedom of expression", "customs duties",
            "the common agricultural policy", "environmental impact assessment", "consumer protection",
            "the most-favoured-nation clause", "umbrella clauses", "full protection and security"]
CONNECTORS = ["Accordingly,", "In these circumstances,", "For these reasons,", "Moreover,",
              "Having regard to the foregoing,", "In the light of the above,", "Furthermore,",
              "On the evidence before it,", "In its view,", "Nevertheless,"]

TOPICS = {
    "customs": ["customs duties", "tariff classification", "import licences", "the common customs tariff"],
    "environment": ["environmental impact assessment", "waste management", "emission allowances", "nature protection"],
    "agriculture": ["the common agricultural policy", "milk quotas", "agricultural subsidies", "plant health"],
    "competition": ["State aid", "abuse of a dominant position", "merger control", "cartel fines"],
    "data": ["the protection of personal data", "data retention", "electronic communications", "privacy notices"],
    "transport": ["road haulage", "air passenger rights", "maritime safety", "rail infrastructure charges"],
}


def date(rng):
    return f"{rng.randint(1, 28)} {rng.choice(MONTHS)} {rng.randint(1990, 2021)}"


def article(rng):
    n = rng.randint(1, 60)
    if rng.random() < 0.4:
        return f"Article {n}({rng.randint(1, 5)})"
    return f"Article {n}"


def reasoning_sentence(rng):
    s = f"{rng.choice(BODIES)} {rng.choice(REASONING)} that the {rng.choice(NOUNS)} {rng.choice(PREDICATES)}."
    if rng.random() < 0.4:
        s = f"{rng.choice(CONNECTORS)} {s[0].lower()}{s[1:]}"
    return s[0].upper() + s[1:]


def procedural_sentence(rng):
    forms = [
        lambda: f"On {date(rng)}, {rng.choice(PARTIES)} {rng.choice(PROCEDURAL)} the {rng.choice(DOCS)} with {rng.choice(OFFICES)}.",
        lambda: f"{rng.choice(PARTIES)} {rng.choice(PROCEDURAL)} its {rng.choice(DOCS)} to {rng.choice(OFFICES)} on {date(rng)}.",
        lambda: f"By letter of {date(rng)}, {rng.choice(PARTIES)} {rng.choice(PROCEDURAL)} a {rng.choice(DOCS)}.",
    ]
    s = rng.choice(forms)()
    return s[0].upper() + s[1:]


def boilerplate_sentence(rng):
    forms = [
        lambda: f"{article(rng)} of {rng.choice(TREATIES)} provides that each Contracting Party shall accord fair and equitable treatment to investments.",
        lambda: f"Regulation (EC) No {rng.randint(100, 2999)}/{rng.randint(1995, 2020)} of the European Parliament and of the Council concerns {rng.choice(SUBJECTS)}.",
        lambda: f"The applicant alleged a violation of {article(rng)} of the Convention in respect of {rng.choice(SUBJECTS)}.",
        lambda: f"Directive {rng.randint(1990, 2020)}/{rng.randint(1, 120)}/EU lays down rules on {rng.choice(SUBJECTS)}.",
        lambda: f"The dispute concerns {rng.choice(SUBJECTS)} under {article(rng)} of {rng.choice(TREATIES)}.",
        lambda: f"The hearing on the merits took place from {date(rng)} to {date(rng)}.",
        lambda: f"Costs in the amount of EUR {rng.randint(10, 999)},{rng.randint(100, 999)} were claimed by {rng.choice(PARTIES)}.",
    ]
    return rng.choice(forms)()


def document(rng):
    out = []
    for _ in range(rng.randint(3, 7)):
        r = rng.random()
        if r < 0.35:
            out.append(reasoning_sentence(rng))
        elif r < 0.7:
            out.append(procedural_sentence(rng))
        else:
            out.append(boilerplate_sentence(rng))
    return " ".join(out)


def clf_example(rng):
    """The label is fixed by the verb alone; the frame is shared by both
    classes, so a model has to know which verbs behave alike."""
    positive = rng.random() < 0.5
    verb = rng.choice(REASONING if positive else PROCEDURAL)
    subject = rng.choice(BODIES + PARTIES)
    text = f"{subject} {verb} the {rng.choice(NOUNS)} concerning {rng.choice(SUBJECTS)}."
    return {"text": text[0].upper() + text[1:], "labels": ["reasoning" if positive else "other"]}


def multilabel_example(rng):
    k = rng.choice([1, 1, 2, 3])
    labels = sorted(rng.sample(sorted(TOPICS), k))
    parts = [rng.choice(TOPICS[l]) for l in labels]
    text = f"{rng.choice(['Regulation', 'Directive', 'Decision'])} on " + " and ".join(parts) + "."
    return {"text": text, "labels": labels}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="data/toy")
    ap.add_argument("--seed", type=int, default=20210601)
    ap.add_argument("--corpus-bytes", type=int, default=1_000_000)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = random.Random(args.seed)

    lines, size = [], 0
    while size < args.corpus_bytes:
        doc = document(rng)
        lines.append(doc)
        size += len(doc.encode()) + 1
    (out / "corpus.txt").write_text("\n".join(lines) + "\n")

    def dump(name, records):
        with open(out / name, "w") as f:
            for r in records:
                f.write(json.dumps(r) + "\n")

    dump("clf_binary.jsonl", [clf_example(rng) for _ in range(500)])
    dump("clf_overfit.jsonl", [clf_example(rng) for _ in range(64)])
    ml = [multilabel_example(rng) for _ in range(60)]
    dump("clf_multilabel.jsonl", ml)
    labels = sorted(TOPICS)
    ideal = []
    for i, r in enumerate(ml):
        scores = [0.9 if l in r["labels"] else 0.1 for l in labels]
        ideal.append({"text_id": i, "labels": labels, "scores": scores})
    dump("ideal_predictions.jsonl", ideal)


if __name__ == "__main__":
    main()

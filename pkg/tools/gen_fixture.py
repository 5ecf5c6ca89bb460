"""Regenerate the bundled desk-scale corpus.

The corpus is synthetic but PTB-shaped: lowercase, whitespace-tokenized,
one sentence per line, numbers collapsed to the literal token "N", and a
sprinkling of literal "<unk>" tokens.  Sentences come from a small
template grammar over eight topics with shared function words, which
gives the text enough conditional structure that a small recurrent model
beats the unigram baseline within a couple of epochs.

Deterministic for a fixed seed.  Usage:

    python3 tools/gen_fixture.py [--seed 20260816] [--out src/rnnpack/data]
"""

import argparse
import pathlib

import numpy as np

TOPICS = {
    "weather": {
        "nouns": ["rain", "wind", "storm", "cloud", "frost", "fog", "thunder",
                  "drizzle", "sky", "gale"],
        "verbs": ["gathered", "cleared", "swept", "lingered", "faded",
                  "returned", "settled", "broke"],
        "adjs": ["gray", "sudden", "heavy", "cold", "mild", "restless"],
        "places": ["valley", "ridge", "coast", "plain"],
    },
    "market": {
        "nouns": ["price", "trader", "stall", "crowd", "coin", "ledger",
                  "bargain", "merchant", "scale", "receipt"],
        "verbs": ["rose", "fell", "haggled", "counted", "offered", "declined",
                  "settled", "doubled"],
        "adjs": ["busy", "narrow", "loud", "honest", "shrewd", "crowded"],
        "places": ["square", "alley", "arcade", "exchange"],
    },
    "farm": {
        "nouns": ["barn", "plow", "harvest", "orchard", "fence", "tractor",
                  "furrow", "granary", "pasture", "well"],
        "verbs": ["planted", "gathered", "repaired", "watered", "plowed",
                  "harvested", "mended", "leased"],
        "adjs": ["dusty", "fertile", "old", "sturdy", "wide", "quiet"],
        "places": ["field", "meadow", "hollow", "hillside"],
    },
    "sea": {
        "nouns": ["tide", "harbor", "sail", "anchor", "gull", "wave", "buoy",
                  "mast", "current", "wharf"],
        "verbs": ["turned", "drifted", "anchored", "launched", "moored",
                  "crossed", "vanished", "surfaced"],
        "adjs": ["salt", "calm", "rough", "distant", "low", "bright"],
        "places": ["bay", "strait", "shoal", "jetty"],
    },
    "music": {
        "nouns": ["violin", "chord", "melody", "drummer", "stage", "encore",
                  "tempo", "chorus", "quartet", "tune"],
        "verbs": ["played", "rehearsed", "tuned", "paused", "swelled",
                  "opened", "closed", "echoed"],
        "adjs": ["slow", "bright", "minor", "gentle", "bold", "familiar"],
        "places": ["hall", "theater", "parlor", "bandstand"],
    },
    "library": {
        "nouns": ["ledger", "volume", "margin", "index", "shelf", "binding",
                  "catalog", "preface", "reader", "archive"],
        "verbs": ["catalogued", "borrowed", "returned", "annotated", "shelved",
                  "restored", "misplaced", "copied"],
        "adjs": ["worn", "rare", "dusty", "thick", "annotated", "quiet"],
        "places": ["stacks", "reading-room", "annex", "basement"],
    },
    "kitchen": {
        "nouns": ["kettle", "loaf", "skillet", "broth", "flour", "oven",
                  "ladle", "pantry", "crumb", "stew"],
        "verbs": ["simmered", "baked", "stirred", "cooled", "seasoned",
                  "burned", "rested", "thickened"],
        "adjs": ["warm", "fresh", "salty", "sweet", "plain", "golden"],
        "places": ["stove", "table", "cellar", "counter"],
    },
    "rail": {
        "nouns": ["engine", "platform", "whistle", "carriage", "signal",
                  "timetable", "porter", "junction", "track", "freight"],
        "verbs": ["departed", "arrived", "slowed", "coupled", "waited",
                  "switched", "halted", "steamed"],
        "adjs": ["late", "early", "long", "crowded", "northbound", "empty"],
        "places": ["station", "yard", "siding", "tunnel"],
    },
}

TEMPLATES = [
    "the {adj} {noun} {verb} in the {place} .",
    "a {noun} {verb} near the {place} and the {noun2} {verb2} .",
    "the {noun} {verb} before the {adj} {noun2} {verb2} .",
    "every {noun} in the {place} {verb} again .",
    "the {adj} {noun} never {verb} but the {noun2} {verb2} .",
    "at N the {noun} {verb} in the {place} .",
    "the {noun} {verb} for N days near the {place} .",
    "some {adj} {noun} {verb} while the {noun2} {verb2} .",
    "no {noun} {verb} until the {adj} {noun2} {verb2} .",
    "the {noun} and the {noun2} {verb} in the {place} .",
]

UNK_RATE = 0.004


def pick(rng, pool):
    return pool[int(rng.integers(len(pool)))]


def sentence(rng, topic):
    words = TOPICS[topic]
    text = pick(rng, TEMPLATES)
    fills = {
        "adj": pick(rng, words["adjs"]),
        "noun": pick(rng, words["nouns"]),
        "noun2": pick(rng, words["nouns"]),
        "verb": pick(rng, words["verbs"]),
        "verb2": pick(rng, words["verbs"]),
        "place": pick(rng, words["places"]),
    }
    tokens = text.format(**fills).split()
    if rng.random() < UNK_RATE * len(tokens):
        tokens[int(rng.integers(len(tokens) - 1))] = "<unk>"
    return tokens


def coverage_sentences():
    """One plain sentence per topic word so the train split sees the
    whole vocabulary at least once."""
    lines = []
    for topic, words in sorted(TOPICS.items()):
        for noun in words["nouns"]:
            for verb in words["verbs"]:
                lines.append(f"the {noun} {verb} .".split())
        for adj in words["adjs"]:
            lines.append(f"the {adj} {pick_first(words['nouns'])} rested .".split())
        for place in words["places"]:
            lines.append(f"the {pick_first(words['nouns'])} stood in the {place} .".split())
    return lines


def pick_first(pool):
    return pool[0]


def generate_split(rng, target_tokens):
    topics = sorted(TOPICS)
    lines = []
    total = 0
    while total < target_tokens:
        topic = topics[int(rng.integers(len(topics)))]
        tokens = sentence(rng, topic)
        lines.append(tokens)
        total += len(tokens) + 1
    return lines


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=20260816)
    parser.add_argument("--out", default="src/rnnpack/data")
    args = parser.parse_args()
    rng = np.random.default_rng(args.seed)
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    train = coverage_sentences()
    rng.shuffle(train)
    covered = sum(len(t) + 1 for t in train)
    train += generate_split(rng, 50_000 - covered)
    rng.shuffle(train)
    splits = {
        "train": train,
        "valid": generate_split(rng, 5_000),
        "test": generate_split(rng, 5_000),
    }

    train_words = {tok for line in splits["train"] for tok in line}
    for name in ("valid", "test"):
        missing = {
            tok for line in splits[name] for tok in line
        } - train_words
        assert not missing, f"{name} split has unseen tokens: {missing}"

    for name, lines in splits.items():
        path = out / f"fixture.{name}.txt"
        path.write_text("".join(" ".join(t) + "\n" for t in lines))
        tokens = sum(len(t) + 1 for t in lines)
        print(f"{path}: {len(lines)} lines, {tokens} tokens (with eos)")
    print(f"distinct train words: {len(train_words)}")


if __name__ == "__main__":
    main()

#!/usr/bin/env python3
"""Generate the bundled toy corpus (data/toy/{train,valid,test}.txt).

Sentences come from a small seeded template grammar over ~200 words, so a
word LM can learn the class structure while within-class choice stays
uniform.
"""
import argparse
import pathlib
import random

CLASSES = {
    "det": ["the", "a", "every", "some", "this", "that"],
    "adj": ["red", "blue", "green", "old", "new", "small", "large", "quiet", "loud", "bright",
            "dark", "cold", "warm", "fast", "slow", "tall", "short", "happy", "sad", "strange"],
    "noun": ["dog", "cat", "bird", "horse", "fish", "tree", "house", "car", "river", "mountain",
             "city", "village", "road", "bridge", "garden", "window", "door", "table", "chair", "book",
             "letter", "song", "story", "child", "teacher", "doctor", "farmer", "king", "queen", "soldier",
             "ship", "train", "apple", "bread", "stone", "lamp", "clock", "field", "forest", "lake"],
    "name": ["alice", "bob", "carol", "dave", "erin", "frank", "grace", "heidi", "ivan", "judy",
             "mallory", "oscar", "peggy", "rupert", "sybil", "trent", "victor", "walter", "yvonne", "zoe"],
    "tverb": ["sees", "finds", "likes", "takes", "builds", "paints", "follows", "carries", "watches", "calls",
              "reads", "writes", "opens", "closes", "sells", "buys", "visits", "helps", "meets", "remembers"],
    "iverb": ["sleeps", "runs", "sings", "waits", "laughs", "falls", "swims", "walks", "smiles", "rests"],
    "adv": ["quickly", "slowly", "often", "rarely", "today", "again", "quietly", "happily", "early", "late"],
    "prep": ["near", "behind", "under", "over", "beside", "across", "inside", "around"],
    "pron": ["he", "she", "they", "we", "you", "it"],
    "num": ["two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "many"],
    "pnoun": ["dogs", "cats", "birds", "houses", "cars", "trees", "books", "songs", "ships", "apples"],
    "conj": ["and", "but", "because", "while"],
    "aux": ["will", "can", "must", "might"],
    "bverb": ["see", "find", "like", "take", "build", "follow", "carry", "watch", "visit", "help"],
}


def noun_phrase(rng):
    words = [rng.choice(CLASSES["det"])]
    if rng.random() < 0.5:
        words.append(rng.choice(CLASSES["adj"]))
    words.append(rng.choice(CLASSES["noun"]))
    return words


def subject(rng):
    r = rng.random()
    if r < 0.4:
        return noun_phrase(rng)
    if r < 0.7:
        return [rng.choice(CLASSES["name"])]
    return [rng.choice(CLASSES["pron"])]


def predicate(rng):
    r = rng.random()
    if r < 0.45:
        words = [rng.choice(CLASSES["tverb"])] + noun_phrase(rng)
    elif r < 0.65:
        words = [rng.choice(CLASSES["tverb"]), rng.choice(CLASSES["num"]), rng.choice(CLASSES["pnoun"])]
    elif r < 0.85:
        words = [rng.choice(CLASSES["iverb"])]
        if rng.random() < 0.5:
            words.append(rng.choice(CLASSES["adv"]))
    else:
        words = [rng.choice(CLASSES["aux"]), rng.choice(CLASSES["bverb"])] + noun_phrase(rng)
    if rng.random() < 0.3:
        words += [rng.choice(CLASSES["prep"])] + noun_phrase(rng)
    return words


def sentence(rng):
    words = subject(rng) + predicate(rng)
    if rng.random() < 0.15:
        words += [rng.choice(CLASSES["conj"])] + subject(rng) + predicate(rng)
    return " ".join(words)


def generate(rng, token_budget):
    lines, tokens = [], 0
    while tokens < token_budget:
        s = sentence(rng)
        lines.append(s)
        tokens += len(s.split()) + 1
    return lines


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=str(pathlib.Path(__file__).resolve().parent.parent / "data" / "toy"))
    ap.add_argument("--seed", type=int, default=2017)
    ap.add_argument("--train-tokens", type=int, default=50000)
    ap.add_argument("--heldout-tokens", type=int, default=5000)
    args = ap.parse_args()

    rng = random.Random(args.seed)
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, budget in (("train", args.train_tokens), ("valid", args.heldout_tokens),
                         ("test", args.heldout_tokens)):
        (out / f"{name}.txt").write_text("\n".join(generate(rng, budget)) + "\n")


if __name__ == "__main__":
    main()

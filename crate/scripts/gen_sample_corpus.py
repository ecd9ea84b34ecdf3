"""Generates the bundled sample corpus: synthetic English-like documents
separated by 0x00 bytes. Deterministic for a given seed."""

import argparse
import random

SUBJECTS = """the engineer|a small robot|the old river|every student|the committee|my neighbor|the
ship|a quiet fox|the orchestra|the city council|our team|the gardener|a young writer|the
mountain guide|the baker|the lighthouse keeper|a tired traveler|the museum|the library|the
market|the farmer|the pilot|the professor|a curious child|the weather station""".replace("\n", " ").split("|")
VERBS = """builds|repairs|describes|follows|watches|measures|carries|paints|remembers|studies|opens|
closes|finds|loses|sells|buys|tests|counts|draws|explains|collects|visits|protects|prepares|questions""".replace("\n", "").split("|")
OBJECTS = """a wooden bridge|the morning train|seven bright lanterns|the northern road|an old map|the
stone wall|a long letter|the harvest|twelve silver coins|the broken clock|a new theory|the
evening news|the winter garden|a hidden door|the main square|three green bottles|the final
report|a paper boat|the village well|the quiet harbor|a heavy box|the spring festival""".replace("\n", " ").split("|")
ADVERBS = "slowly|carefully|again|every day|before noon|after the storm|without a word|with great care|in silence|at dawn".split("|")
CONNECT = "and then|but|because|while|so|although|after that|meanwhile".split("|")
TOPICS = "On Bridges|Notes from the Harbor|A Village Record|Field Journal|Letters Home|The Market Report|Weather Log|Workshop Diary".split("|")


def sentence(rng):
    s = f"{rng.choice(SUBJECTS)} {rng.choice(VERBS)} {rng.choice(OBJECTS)}"
    if rng.random() < 0.5:
        s += f" {rng.choice(ADVERBS)}"
    if rng.random() < 0.35:
        s += f", {rng.choice(CONNECT)} {rng.choice(SUBJECTS)} {rng.choice(VERBS)} {rng.choice(OBJECTS)}"
    if rng.random() < 0.1:
        s += f" in {rng.randint(1800, 2030)}"
    s = s[0].upper() + s[1:]
    return s + rng.choice([".", ".", ".", "!", "?"])


def document(rng):
    title = f"{rng.choice(TOPICS)} No. {rng.randint(1, 999)}"
    paragraphs = []
    for _ in range(rng.randint(2, 6)):
        paragraphs.append(" ".join(sentence(rng) for _ in range(rng.randint(3, 8))))
    return title + "\n\n" + "\n\n".join(paragraphs) + "\n"


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--bytes", type=int, default=1 << 20)
    ap.add_argument("--seed", type=int, default=2022)
    ap.add_argument("out")
    args = ap.parse_args()
    rng = random.Random(args.seed)
    out = bytearray()
    while len(out) < args.bytes:
        out += document(rng).encode("ascii") + b"\x00"
    with open(args.out, "wb") as f:
        f.write(bytes(out[: args.bytes]))


if __name__ == "__main__":
    main()

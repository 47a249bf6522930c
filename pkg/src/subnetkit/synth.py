"""Deterministic generator for the bundled toy corpus and fact table.

Run ``python -m subnetkit.synth <out_dir>`` to regenerate ``corpus.txt`` and
``facts.tsv``. The text is produced from a small phrase grammar so that it
has learnable structure without depending on external downloads.
"""
from __future__ import annotations

import sys
from pathlib import Path

from .tensor import Rng

PEOPLE = [
    "the miller", "the old sailor", "a young clerk", "the baker", "my neighbour",
    "the shepherd", "a tired traveller", "the weaver", "the captain", "her brother",
    "the widow", "a quiet boy", "the farmer", "the doctor", "his sister",
    "the innkeeper", "a stranger", "the teacher", "the carpenter", "our guide",
]
VERBS = [
    "walked to", "looked at", "spoke of", "waited by", "carried water to",
    "sang near", "returned from", "painted", "remembered", "searched",
    "cleaned", "left", "repaired", "visited", "watched",
]
PLACES = [
    "the river", "the mill", "the market", "the old bridge", "the harbour",
    "the church", "the garden", "the hill", "the forest", "the station",
    "the school", "the well", "the farm", "the village square", "the shore",
]
TIMES = [
    "in the morning", "at noon", "before supper", "after the rain", "at dawn",
    "late in the evening", "on sunday", "during the storm", "in the spring",
    "when the bells rang",
]
ADJ = ["cold", "bright", "quiet", "grey", "warm", "long", "empty", "busy", "small", "wet"]
NOUNS = ["wind", "day", "road", "sky", "house", "field", "night", "room", "boat", "light"]
LINKS = ["and then", "because", "while", "but", "so"]
FEELINGS = ["glad", "tired", "worried", "calm", "hungry", "surprised", "patient", "sad"]

SYLLABLES = [
    "ka", "ro", "vel", "min", "tor", "zu", "lan", "qui", "fen", "dra", "sol", "mer",
    "bax", "til", "wen", "gor", "pha", "nim", "jor", "eck", "yst", "ul", "bri", "cov",
]
OBJECTS = "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789"


def _pick(rng: Rng, xs):
    return xs[int(rng.integers(0, len(xs)))]


def _sentence(rng: Rng) -> str:
    form = int(rng.integers(0, 5))
    if form == 0:
        s = f"{_pick(rng, PEOPLE)} {_pick(rng, VERBS)} {_pick(rng, PLACES)} {_pick(rng, TIMES)}"
    elif form == 1:
        s = f"the {_pick(rng, NOUNS)} was {_pick(rng, ADJ)} {_pick(rng, TIMES)}"
    elif form == 2:
        s = (
            f"{_pick(rng, PEOPLE)} {_pick(rng, VERBS)} {_pick(rng, PLACES)}, "
            f"{_pick(rng, LINKS)} {_pick(rng, PEOPLE)} was {_pick(rng, FEELINGS)}"
        )
    elif form == 3:
        s = f"{_pick(rng, TIMES)} {_pick(rng, PEOPLE)} felt {_pick(rng, FEELINGS)}"
    else:
        s = f"near {_pick(rng, PLACES)} the {_pick(rng, NOUNS)} grew {_pick(rng, ADJ)}"
    return s[0].upper() + s[1:] + "."


def generate_text(seed: int = 7, n_chars: int = 60_000) -> str:
    rng = Rng(seed)
    paras = []
    total = 0
    while total < n_chars:
        n = int(rng.integers(3, 8))
        p = " ".join(_sentence(rng) for _ in range(n))
        paras.append(p)
        total += len(p) + 2
    return "\n\n".join(paras) + "\n"


def generate_facts(seed: int = 11, n: int = 64) -> list[tuple[str, str]]:
    rng = Rng(seed)
    names: list[str] = []
    while len(names) < n:
        k = int(rng.integers(2, 4))
        name = "".join(_pick(rng, SYLLABLES) for _ in range(k)).capitalize()
        if name not in names:
            names.append(name)
    return [(name, _pick(rng, OBJECTS)) for name in names]


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    out = Path(argv[0] if argv else ".")
    out.mkdir(parents=True, exist_ok=True)
    (out / "corpus.txt").write_text(generate_text(), encoding="ascii")
    with open(out / "facts.tsv", "w", encoding="ascii") as fh:
        for subj, obj in generate_facts():
            fh.write(f"{subj}\t{obj}\n")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

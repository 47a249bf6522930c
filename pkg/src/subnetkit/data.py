"""Corpus handling, fact probes, evaluators and the evaluation cache."""
from __future__ import annotations

import hashlib
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import Rng, no_grad

DATA_DIR = Path(__file__).parent / "data"
FACT_TEMPLATE = "The code of {subject} is {object}."
PROBE_TEMPLATE = "\nThe code of {subject} is "


class CharTokenizer:
    """Newline plus printable ASCII (32..126): 96 symbols."""

    def __init__(self):
        self.itos = ["\n"] + [chr(c) for c in range(32, 127)]
        self.stoi = {ch: i for i, ch in enumerate(self.itos)}
        self.unk = self.stoi["?"]

    @property
    def vocab_size(self) -> int:
        return len(self.itos)

    def encode(self, text: str) -> np.ndarray:
        return np.array([self.stoi.get(ch, self.unk) for ch in text], dtype=np.int64)

    def decode(self, ids) -> str:
        return "".join(self.itos[int(i)] for i in ids)


@dataclass(frozen=True)
class Fact:
    subject: str
    object: str

    def sentence(self) -> str:
        return FACT_TEMPLATE.format(subject=self.subject, object=self.object)

    def prompt(self) -> str:
        return PROBE_TEMPLATE.format(subject=self.subject)


@dataclass
class FactSet:
    facts: list[Fact]
    repeats: int = 8

    def __len__(self) -> int:
        return len(self.facts)

    def subset(self, idx) -> "FactSet":
        return FactSet([self.facts[int(i)] for i in idx], self.repeats)


def load_facts(path: str | Path) -> FactSet:
    facts = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2 or len(parts[1]) != 1:
            raise ValueError(f"{path}:{n}: expected 'subject<TAB>single-char object'")
        facts.append(Fact(parts[0], parts[1]))
    if not facts:
        raise ValueError(f"{path}: no facts")
    return FactSet(facts)


@dataclass
class Corpus:
    """Token streams. ``train`` carries the fact sentences, the rest do not."""

    train: np.ndarray
    text_train: np.ndarray  # train text without fact sentences (fine-tuning data)
    valid: np.ndarray
    calib: np.ndarray
    facts: FactSet
    tokenizer: CharTokenizer = field(default_factory=CharTokenizer)

    def sample_batch(self, rng: Rng, batch: int, seq_len: int, stream: str = "train"):
        data = getattr(self, stream)
        if len(data) < seq_len + 1:
            raise ValueError(f"{stream} stream has {len(data)} tokens, need at least {seq_len + 1}")
        starts = rng.integers(0, len(data) - seq_len, size=batch)
        idx = starts[:, None] + np.arange(seq_len + 1)
        chunk = data[idx]
        return chunk[:, :-1], chunk[:, 1:]


def build_corpus(
    text: str,
    facts: FactSet,
    seed: int = 0,
    valid_frac: float = 0.1,
    calib_frac: float = 0.1,
) -> Corpus:
    """Split paragraphs into train/valid/calib and scatter fact lines into train."""
    tok = CharTokenizer()
    paras = [p.strip() for p in text.split("\n\n") if p.strip()]
    if len(paras) < 3:
        raise ValueError("corpus needs at least three paragraphs")
    rng = Rng(seed)
    order = rng.permutation(len(paras))
    n_valid = max(1, int(round(valid_frac * len(paras))))
    n_calib = max(1, int(round(calib_frac * len(paras))))
    valid_ids = sorted(order[:n_valid])
    calib_ids = sorted(order[n_valid : n_valid + n_calib])
    train_ids = sorted(order[n_valid + n_calib :])
    train_paras = [paras[i] for i in train_ids]
    for f in facts.facts:
        for p in (paras[i] for i in valid_ids + calib_ids):
            if f.subject in p:
                raise ValueError(f"fact subject {f.subject!r} leaks into held-out text")

    # fact lines go between paragraphs at seeded positions
    lines: list[list[str]] = [[] for _ in range(len(train_paras) + 1)]
    for f in facts.facts:
        for _ in range(facts.repeats):
            lines[int(rng.integers(0, len(lines)))].append(f.sentence())
    pieces = []
    for i in range(len(train_paras) + 1):
        pieces.extend(lines[i])
        if i < len(train_paras):
            pieces.append(train_paras[i])
    train_text = "\n".join(pieces) + "\n"
    return Corpus(
        train=tok.encode(train_text),
        text_train=tok.encode("\n".join(train_paras) + "\n"),
        valid=tok.encode("\n".join(paras[i] for i in valid_ids) + "\n"),
        calib=tok.encode("\n".join(paras[i] for i in calib_ids) + "\n"),
        facts=facts,
        tokenizer=tok,
    )


def load_corpus(corpus_path=None, facts_path=None, seed: int = 0) -> Corpus:
    corpus_path = Path(corpus_path) if corpus_path else DATA_DIR / "corpus.txt"
    facts_path = Path(facts_path) if facts_path else DATA_DIR / "facts.tsv"
    return build_corpus(corpus_path.read_text(encoding="utf-8"), load_facts(facts_path), seed)


def calibration_facts(facts: FactSet, n: int = 40, seed: int = 0) -> FactSet:
    """Seeded subset of ``n`` probes used for calibration."""
    if n > len(facts):
        raise ValueError(f"asked for {n} calibration facts, only {len(facts)} exist")
    return facts.subset(sorted(Rng(seed).permutation(len(facts))[:n]))


def eval_windows(tokens: np.ndarray, seq_len: int, n_tokens: int | None = None):
    """Non-overlapping next-token windows covering up to ``n_tokens`` targets."""
    n_win = (len(tokens) - 1) // seq_len
    if n_tokens is not None:
        n_win = min(n_win, max(1, n_tokens // seq_len))
    if n_win < 1:
        raise ValueError("evaluation stream shorter than one window")
    idx = np.arange(n_win)[:, None] * seq_len + np.arange(seq_len + 1)
    chunk = tokens[idx]
    return chunk[:, :-1], chunk[:, 1:]


def _logits(model, tokens, shape):
    with no_grad():
        return model.forward(tokens, shape).data


def perplexity(model, shape, tokens: np.ndarray, seq_len: int | None = None, n_tokens=None) -> float:
    """exp(mean next-token NLL) over ``tokens``."""
    if tokens is None or len(tokens) < 2:
        raise ValueError("perplexity: empty calibration set")
    seq_len = seq_len or model.config.max_seq_len
    x, y = eval_windows(tokens, seq_len, n_tokens)
    logits = _logits(model, x, shape).astype(np.float64)
    m = logits.max(axis=-1, keepdims=True)
    lse = (m + np.log(np.exp(logits - m).sum(axis=-1, keepdims=True)))[..., 0]
    nll = lse - np.take_along_axis(logits, y[..., None], axis=-1)[..., 0]
    return float(math.exp(nll.mean()))


def fact_accuracy(model, shape, facts: FactSet, tokenizer: CharTokenizer | None = None) -> float:
    """Fraction of probes whose argmax next token is the true object."""
    if facts is None or len(facts) == 0:
        raise ValueError("fact_accuracy: empty fact set")
    tok = tokenizer or CharTokenizer()
    prompts = [tok.encode(f.prompt()) for f in facts.facts]
    targets = np.array([tok.stoi[f.object] for f in facts.facts])
    lengths = np.array([len(p) for p in prompts])
    width = int(lengths.max())
    pad = tok.stoi[" "]
    batch = np.full((len(prompts), width), pad, dtype=np.int64)
    for i, p in enumerate(prompts):
        batch[i, : len(p)] = p
    logits = _logits(model, batch, shape)
    last = logits[np.arange(len(prompts)), lengths - 1]
    return float((last.argmax(axis=-1) == targets).mean())


class Evaluator:
    """Calibration metric with a uniform larger-is-better orientation."""

    def __init__(self, kind: str, *, tokens=None, facts: FactSet | None = None, seq_len=None, n_tokens=4096):
        if kind not in ("ppl", "facts"):
            raise ValueError(f"unknown metric kind {kind!r}")
        if kind == "ppl" and (tokens is None or len(tokens) < 2):
            raise ValueError("ppl evaluator needs a calibration token stream")
        if kind == "facts" and (facts is None or len(facts) == 0):
            raise ValueError("facts evaluator needs a nonempty fact set")
        self.kind = kind
        self.tokens = tokens
        self.facts = facts
        self.seq_len = seq_len
        self.n_tokens = n_tokens
        self.calls = 0
        self._lock = threading.Lock()

    @property
    def larger_is_better(self) -> bool:
        return True

    def raw(self, model, shape) -> float:
        with self._lock:
            self.calls += 1
        if self.kind == "ppl":
            return perplexity(model, shape, self.tokens, self.seq_len, self.n_tokens)
        return fact_accuracy(model, shape, self.facts)

    def orient(self, raw: float) -> float:
        return -raw if self.kind == "ppl" else raw

    def __call__(self, model, shape) -> float:
        return self.orient(self.raw(model, shape))

    def fingerprint(self) -> str:
        h = hashlib.sha256(self.kind.encode())
        if self.kind == "ppl":
            h.update(np.ascontiguousarray(self.tokens, dtype=np.int64).tobytes())
            h.update(f"{self.seq_len}:{self.n_tokens}".encode())
        else:
            for f in self.facts.facts:
                h.update(f"{f.subject}\t{f.object}\n".encode())
        return h.hexdigest()[:16]


class EvalCache:
    """Scores keyed by (retained-layer bitmask, width index, metric kind)."""

    def __init__(self):
        self._scores: dict[tuple[str, int, str], float] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._scores)

    def get(self, key):
        with self._lock:
            return self._scores.get(key)

    def put(self, key, value: float) -> None:
        with self._lock:
            self._scores[key] = value


def cached_evaluate(cache: EvalCache, evaluator: Evaluator, model, shape) -> float:
    key = (shape.mask_string(), shape.width_index, evaluator.kind)
    hit = cache.get(key)
    if hit is not None:
        return hit
    score = evaluator(model, shape)
    cache.put(key, score)
    return score

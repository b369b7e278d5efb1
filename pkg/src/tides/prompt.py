"""Statistical prompt descriptors, their text rendering, and a closed-vocabulary tokenizer."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tod import TodWindows

DEFAULT_EPS = 1e-5
VOCAB_PATH = Path(__file__).parent / "assets" / "vocab.txt"
PAR_MODES = ("literal", "max_over_mean")


@dataclass
class PromptDescriptor:
    stat: dict[str, float]
    tnd: dict[str, object]
    tod: dict[str, float]
    dsm: dict[str, float]
    epsilon: float = DEFAULT_EPS
    rendered_text: str = ""
    token_ids: list[int] = field(default_factory=list)

    @property
    def direction(self) -> str:
        return self.tnd["direction"]


def _ratio(a: float, b: float) -> float:
    # IEEE division like the vectorized path: a zero denominator gives inf/nan, not an exception
    with np.errstate(divide="ignore", invalid="ignore"):
        return float(np.float64(a) / np.float64(b))


def _lower_median(x: np.ndarray) -> float:
    return float(np.sort(x)[(len(x) - 1) // 2])


def compute_descriptor(window, timestamps, eps: float = DEFAULT_EPS, tod: TodWindows | None = None,
                       par_mode: str = "literal") -> PromptDescriptor:
    x = np.asarray(window, dtype=np.float64)
    if x.size < 2:
        raise ValueError("descriptor needs at least two samples")
    if len(timestamps) != x.size:
        raise ValueError("timestamps must align with the window")
    if eps <= 0:
        raise ValueError("eps must be positive")
    if par_mode not in PAR_MODES:
        raise ValueError(f"par_mode must be one of {PAR_MODES}")
    masks = (tod or TodWindows()).masks(timestamps)
    stat = {
        "min": float(x.min()),
        "max": float(x.max()),
        "median": _lower_median(x),
        "mean": float(x.mean()),
        "std": float(x.std()),
    }
    trend = float(np.diff(x).sum())
    levels = {k: float(x[m].mean()) if m.any() else 0.0 for k, m in masks.items()}
    half = x.size // 2
    peak_ref = stat["max"] if par_mode == "literal" else stat["mean"]
    dsm = {
        "par": _ratio(stat["max"], peak_ref + eps),
        "rhi": _ratio(levels["am"] + levels["pm"], 2.0 * levels["non_rush"] + eps),
        "mer": _ratio(levels["am"], levels["pm"] + eps),
        "burst": _ratio(stat["std"], stat["mean"] + eps),
        "vc": _ratio(float(x[half:].std()), float(x[:half].std()) + eps),
    }
    return PromptDescriptor(
        stat=stat,
        tnd={"trend_sum": trend, "direction": "upward" if trend >= 0 else "downward"},
        tod={k: levels[k] for k in ("am", "pm", "night", "non_rush")},
        dsm=dsm,
        epsilon=eps,
    )


def descriptor_matrix(windows: np.ndarray, masks: dict[str, np.ndarray], eps: float = DEFAULT_EPS,
                      par_mode: str = "literal") -> np.ndarray:
    """Vectorized descriptor values for ``windows`` of shape (N, H).

    ``masks`` holds per-window boolean arrays of shape (N, H). Columns follow
    :data:`DESCRIPTOR_FIELDS`; the trend column is the trend sum.
    """
    x = np.asarray(windows, dtype=np.float64)
    n, h = x.shape
    mn, mx = x.min(axis=1), x.max(axis=1)
    med = np.sort(x, axis=1)[:, (h - 1) // 2]
    mean = x.mean(axis=1)
    std = x.std(axis=1)
    trend = np.diff(x, axis=1).sum(axis=1)

    def level(m):
        cnt = m.sum(axis=1)
        return np.where(cnt > 0, (x * m).sum(axis=1) / np.maximum(cnt, 1), 0.0)

    am, pm, night, nonrush = (level(masks[k]) for k in ("am", "pm", "night", "non_rush"))
    half = h // 2
    peak_ref = mx if par_mode == "literal" else mean
    cols = [
        mn, mx, med, mean, std, trend, am, pm, night, nonrush,
        mx / (peak_ref + eps),
        (am + pm) / (2.0 * nonrush + eps),
        am / (pm + eps),
        std / (mean + eps),
        x[:, half:].std(axis=1) / (x[:, :half].std(axis=1) + eps),
    ]
    return np.stack(cols, axis=1)


DESCRIPTOR_FIELDS = ("min", "max", "median", "mean", "std", "trend", "am", "pm", "night", "non_rush",
                     "par", "rhi", "mer", "burst", "vc")


def descriptor_values(d: PromptDescriptor) -> np.ndarray:
    return np.array([d.stat["min"], d.stat["max"], d.stat["median"], d.stat["mean"], d.stat["std"],
                     d.tnd["trend_sum"], d.tod["am"], d.tod["pm"], d.tod["night"], d.tod["non_rush"],
                     d.dsm["par"], d.dsm["rhi"], d.dsm["mer"], d.dsm["burst"], d.dsm["vc"]])


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def render_values(region_id: str, values, horizon: int) -> str:
    """Render one descriptor row (in :data:`DESCRIPTOR_FIELDS` order) to prompt text."""
    v = dict(zip(DESCRIPTOR_FIELDS, (float(a) for a in values)))
    direction = "upward" if v["trend"] >= 0 else "downward"
    parts = [
        f"forecast region {region_id} traffic",
        "stats " + " ".join(f"{k}={_fmt(v[k])}" for k in ("min", "max", "median", "mean", "std")),
        f"trend={_fmt(v['trend'])} {direction}",
        "tod " + " ".join(f"{k.replace('_', '')}={_fmt(v[k])}" for k in ("am", "pm", "night", "non_rush")),
        "dsm " + " ".join(f"{k}={_fmt(v[k])}" for k in ("par", "rhi", "mer", "burst", "vc")),
        f"predict the next {horizon} steps",
    ]
    return " ".join(parts)


def render_prompt(d: PromptDescriptor, region_id: str, horizon: int) -> str:
    text = render_values(region_id, descriptor_values(d), horizon)
    d.rendered_text = text
    return text


# ------------------------------------------------------------------ tokenizer
PAD = "<pad>"
UNK = "<unk>"
SPACE = "<sp>"
WORD_START = "\u2581"

_TEMPLATE_WORDS = (
    "forecast", "region", "traffic", "stats", "trend", "upward", "downward", "tod", "dsm",
    "predict", "the", "next", "steps", "min", "max", "median", "mean", "std", "am", "pm",
    "night", "nonrush", "par", "rhi", "mer", "burst", "vc",
)
_LETTERS = [chr(c) for c in range(ord("a"), ord("z") + 1)] + [chr(c) for c in range(ord("A"), ord("Z") + 1)]
_NUMBER = re.compile(r"-?\d+\.\d\d")
_PIECE = re.compile(r"[A-Za-z_]+=?|\d\d?|[^\w\s]")


def _default_vocab() -> list[str]:
    words = set(_TEMPLATE_WORDS) | {w + "=" for w in _TEMPLATE_WORDS}
    toks = {PAD, UNK, SPACE, "-", ".", "="} | set("_,:;/()") | words | set(_LETTERS)
    toks |= {str(i) for i in range(10)} | {f"{i:02d}" for i in range(100)}
    toks |= {f"{i}." for i in range(-19, 20)} | {"-0."}
    toks |= {WORD_START + t for t in words | set(_LETTERS) | {str(i) for i in range(10)}}
    return sorted(toks)


class PromptTokenizer:
    """Word-level tokenizer over a closed vocabulary.

    A word's first piece carries a leading ``\u2581`` marker when the vocabulary
    has that form, otherwise an explicit ``<sp>`` token precedes it. Numbers
    with two decimals become an integer-part token such as ``"-1."`` plus a
    two-digit fraction token; integer parts outside the vocabulary fall back
    to digit pairs. Other unknown words are spelled letter by letter, and
    anything still unmatched becomes ``<unk>``.
    """

    def __init__(self, vocab: list[str] | None = None):
        self.vocab = list(vocab) if vocab is not None else _default_vocab()
        self.ids = {t: i for i, t in enumerate(self.vocab)}
        if len(self.ids) != len(self.vocab):
            raise ValueError("duplicate tokens in vocabulary")
        self.pad_id = self.ids[PAD]
        self.unk_id = self.ids[UNK]
        self._cache: dict[str, list[str]] = {}

    def __len__(self) -> int:
        return len(self.vocab)

    def _word_pieces(self, word: str) -> list[str]:
        out: list[str] = []
        pos = 0
        while pos < len(word):
            m = _NUMBER.match(word, pos)
            if m:
                whole, frac = m.group().split(".")
                if f"{whole}." in self.ids:
                    out += [f"{whole}.", frac]
                else:
                    if whole.startswith("-"):
                        out.append("-")
                        whole = whole[1:]
                    out += [whole[i:i + 2] for i in range(0, len(whole), 2)] + [".", frac]
                pos = m.end()
                continue
            m = _PIECE.match(word, pos)
            piece = m.group() if m else word[pos]
            pos += len(piece)
            if piece in self.ids:
                out.append(piece)
            elif all(c in self.ids for c in piece):
                out.extend(piece)
            else:
                out.append(UNK)
        return out

    def _pieces(self, word: str) -> list[str]:
        hit = self._cache.get(word)
        if hit is None:
            body = self._word_pieces(word)
            marked = WORD_START + body[0]
            hit = [marked] + body[1:] if marked in self.ids else [SPACE] + body
            self._cache[word] = hit
        return hit

    def encode_unpadded(self, text: str) -> list[int]:
        return [self.ids[p] for w in text.split() for p in self._pieces(w)]

    def decode(self, ids) -> str:
        words: list[str] = []
        for i in ids:
            if i == self.pad_id:
                continue
            tok = self.vocab[i]
            if tok == SPACE:
                words.append("")
            elif tok.startswith(WORD_START):
                words.append(tok[1:])
            elif words:
                words[-1] += tok
            else:
                words.append(tok)
        return " ".join(words)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.vocab) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "PromptTokenizer":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


def tokenize(text: str, tokenizer: PromptTokenizer, max_len: int = 64) -> list[int]:
    """Encode, then truncate the tail or right-pad with ``<pad>`` to ``max_len``."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    ids = tokenizer.encode_unpadded(text)[:max_len]
    return ids + [tokenizer.pad_id] * (max_len - len(ids))

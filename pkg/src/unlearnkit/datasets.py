"""Tokenizer, record formats, contrastive-pair construction and the biased corpus.

All files are UTF-8. Corpora are plain text with one document per line;
structured records are JSON Lines:

* contrastive source: ``{context, question, option_a, option_b,
  stereotyped: "a"|"b", ambiguous: bool, group}``
* bias evaluation: ``{stereo, anti, category}``
* multiple choice: ``{prompt, choices: [...], answer_index}``
* stereotype sentences: ``{context, stereotyped_sentence, domain}``
* comments: ``{text, toxicity, domain}``
"""

from __future__ import annotations

import collections
import dataclasses
import json
from pathlib import Path
from typing import Iterable, Sequence

from .errors import DataError

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)
OPTION_LETTERS = ("A", "B")

PROTECTED_GROUPS = (
    "race-ethnicity",
    "SES",
    "gender identity",
    "age",
    "nationality",
    "physical appearance",
    "disability status",
    "religion",
    "sexual orientation",
)

BIAS_CATEGORIES = (
    "age",
    "autre",
    "disability",
    "gender",
    "nationality",
    "physical-appearance",
    "race-color",
    "religion",
    "sexual-orientation",
    "socioeconomic",
)

TOXIC_DOMAINS = ("identity attack", "sexual explicit")


class Vocab:
    """Word-level vocabulary. Ids 0-3 are pad, bos, eos, unk."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:4]) != SPECIALS:
            raise DataError("vocabulary must start with the four special tokens")
        if len(set(tokens)) != len(tokens):
            raise DataError("duplicate tokens in vocabulary")
        self.tokens = list(tokens)
        self.ids = {t: i for i, t in enumerate(self.tokens)}
        for letter in OPTION_LETTERS:
            if letter not in self.ids:
                raise DataError(f"option letter {letter!r} missing from vocabulary")

    pad_id, bos_id, eos_id, unk_id = 0, 1, 2, 3

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def __contains__(self, token: str) -> bool:
        return token in self.ids

    def id(self, token: str) -> int:
        return self.ids.get(token, self.unk_id)

    def encode(self, text: str, bos: bool = False, eos: bool = False) -> list[int]:
        ids = [self.id(w) for w in text.split()]
        if bos:
            ids.insert(0, self.bos_id)
        if eos:
            ids.append(self.eos_id)
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        skip = (self.pad_id, self.bos_id, self.eos_id)
        return " ".join(self.tokens[i] for i in ids if i not in skip)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.tokens, ensure_ascii=False) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        try:
            return cls(json.loads(Path(path).read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: not a JSON token list") from exc


def build_vocab(corpus: str) -> Vocab:
    """Frequency-ordered vocabulary (ties broken lexicographically), letters A/B forced in."""
    words = [w for w in corpus.split() if w not in SPECIALS]
    if not words:
        raise DataError("cannot build a vocabulary from an empty corpus")
    counts = collections.Counter(words)
    ordered = sorted(counts, key=lambda w: (-counts[w], w))
    ordered += [letter for letter in OPTION_LETTERS if letter not in counts]
    return Vocab(list(SPECIALS) + ordered)


# ---------------------------------------------------------------------------
# record types
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class ContrastivePair:
    prefix_tokens: tuple[int, ...]
    advantaged_token: int
    disadvantaged_token: int
    group: str

    @property
    def advantaged_sequence(self) -> list[int]:
        return [*self.prefix_tokens, self.advantaged_token]

    @property
    def disadvantaged_sequence(self) -> list[int]:
        return [*self.prefix_tokens, self.disadvantaged_token]


@dataclasses.dataclass(frozen=True)
class BiasEvalPair:
    stereo_tokens: tuple[int, ...]
    anti_tokens: tuple[int, ...]
    category: str


@dataclasses.dataclass(frozen=True)
class MCItem:
    prompt_tokens: tuple[int, ...]
    choice_tokens: tuple[tuple[int, ...], ...]
    answer_index: int


@dataclasses.dataclass
class BiasedCorpusSpec:
    stereoset: list[dict]
    comments: list[dict]
    toxicity_threshold: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.toxicity_threshold <= 1.0:
            raise DataError(f"toxicity threshold {self.toxicity_threshold} outside [0, 1]")


# ---------------------------------------------------------------------------
# JSONL helpers
# ---------------------------------------------------------------------------


def read_jsonl(path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
    return records


def write_jsonl(path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n")


def read_lines(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.strip() for line in fh if line.strip()]


def write_lines(path, lines: Iterable[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(line + "\n")


def _require(record: dict, fields: Sequence[str], what: str) -> None:
    missing = [f for f in fields if f not in record]
    if missing:
        raise DataError(f"{what} record missing fields {missing}: {record!r:.120}")


# ---------------------------------------------------------------------------
# contrastive pairs
# ---------------------------------------------------------------------------

CONTRASTIVE_FIELDS = ("context", "question", "option_a", "option_b", "stereotyped", "ambiguous", "group")


def render_prefix(record: dict) -> str:
    return (
        f"{record['context']} {record['question']} Choose among the following two options: "
        f"A: {record['option_a']}; B: {record['option_b']}. Answer: Option"
    )


def make_contrastive_pairs(records: Iterable[dict], vocab: Vocab) -> list[ContrastivePair]:
    """Turn ambiguous QA records into single-token contrastive pairs.

    The completion naming the stereotyped entity's option letter is the
    advantaged token; option order is taken from the record as-is.
    """
    letter_ids = {}
    for letter in OPTION_LETTERS:
        tokens = vocab.encode(letter)
        if len(tokens) != 1 or tokens[0] == vocab.unk_id:
            raise DataError(f"option letter {letter!r} is not a single known token")
        letter_ids[letter.lower()] = tokens[0]

    pairs = []
    for rec in records:
        _require(rec, CONTRASTIVE_FIELDS, "contrastive")
        if not isinstance(rec["ambiguous"], bool):
            raise DataError(f"'ambiguous' must be a boolean, got {rec['ambiguous']!r}")
        if not rec["ambiguous"]:
            continue
        side = rec["stereotyped"]
        if side not in ("a", "b"):
            raise DataError(f"'stereotyped' must be 'a' or 'b', got {side!r}")
        if rec["group"] not in PROTECTED_GROUPS:
            raise DataError(f"unknown protected group {rec['group']!r}")
        other = "b" if side == "a" else "a"
        pairs.append(
            ContrastivePair(
                prefix_tokens=tuple(vocab.encode(render_prefix(rec), bos=True)),
                advantaged_token=letter_ids[side],
                disadvantaged_token=letter_ids[other],
                group=rec["group"],
            )
        )
    return pairs


def load_bias_pairs(records: Iterable[dict], vocab: Vocab) -> list[BiasEvalPair]:
    out = []
    for rec in records:
        _require(rec, ("stereo", "anti", "category"), "bias eval")
        if rec["category"] not in BIAS_CATEGORIES:
            raise DataError(f"unknown bias category {rec['category']!r}")
        stereo, anti = rec["stereo"].split(), rec["anti"].split()
        if not stereo or not anti:
            raise DataError("bias eval sentences must be non-empty")
        out.append(
            BiasEvalPair(
                tuple(vocab.encode(rec["stereo"], bos=True)),
                tuple(vocab.encode(rec["anti"], bos=True)),
                rec["category"],
            )
        )
    return out


def load_mc_items(records: Iterable[dict], vocab: Vocab) -> list[MCItem]:
    out = []
    for rec in records:
        _require(rec, ("prompt", "choices", "answer_index"), "multiple-choice")
        choices = rec["choices"]
        if not isinstance(choices, list) or len(choices) < 2:
            raise DataError("multiple-choice items need at least 2 choices")
        if not isinstance(rec["answer_index"], int) or not 0 <= rec["answer_index"] < len(choices):
            raise DataError(f"answer_index {rec['answer_index']!r} out of range")
        if not rec["prompt"].split() or any(not c.split() for c in choices):
            raise DataError("prompt and choices must be non-empty")
        out.append(
            MCItem(
                tuple(vocab.encode(rec["prompt"], bos=True)),
                tuple(tuple(vocab.encode(c)) for c in choices),
                rec["answer_index"],
            )
        )
    return out


# ---------------------------------------------------------------------------
# biased fine-tuning corpus
# ---------------------------------------------------------------------------


def _normalize_domain(domain: str) -> str:
    return domain.replace("_", " ").strip().lower()


def build_bias_corpus(spec: BiasedCorpusSpec) -> list[str]:
    """Stereotype sentences joined to their context, then toxic identity comments."""
    lines = []
    for rec in spec.stereoset:
        _require(rec, ("context", "stereotyped_sentence"), "stereotype")
        lines.append(f"{rec['context']} {rec['stereotyped_sentence']}")
    for rec in spec.comments:
        _require(rec, ("text", "toxicity", "domain"), "comment")
        tox = float(rec["toxicity"])
        if not 0.0 <= tox <= 1.0:
            raise DataError(f"toxicity {tox} outside [0, 1]")
        if tox > spec.toxicity_threshold and _normalize_domain(rec["domain"]) in TOXIC_DOMAINS:
            lines.append(rec["text"])
    return [" ".join(line.split()) for line in lines]


# ---------------------------------------------------------------------------
# tokenized pair files
# ---------------------------------------------------------------------------


def pair_to_record(pair: ContrastivePair) -> dict:
    return {
        "advantaged_token": pair.advantaged_token,
        "disadvantaged_token": pair.disadvantaged_token,
        "group": pair.group,
        "prefix_tokens": list(pair.prefix_tokens),
    }


def pair_from_record(rec: dict, vocab_size: int | None = None) -> ContrastivePair:
    _require(rec, ("prefix_tokens", "advantaged_token", "disadvantaged_token", "group"), "tokenized pair")
    ids = [*rec["prefix_tokens"], rec["advantaged_token"], rec["disadvantaged_token"]]
    if not rec["prefix_tokens"] or not all(isinstance(i, int) and i >= 0 for i in ids):
        raise DataError("tokenized pair needs a non-empty prefix and non-negative integer ids")
    if vocab_size is not None and max(ids) >= vocab_size:
        raise DataError(f"token id {max(ids)} outside vocabulary of size {vocab_size}")
    if rec["advantaged_token"] == rec["disadvantaged_token"]:
        raise DataError("advantaged and disadvantaged tokens must differ")
    return ContrastivePair(tuple(rec["prefix_tokens"]), rec["advantaged_token"], rec["disadvantaged_token"], rec["group"])

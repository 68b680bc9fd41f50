"""Closed word-level vocabulary and interleaved token streams."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from ..synth import grammar_words
from ..world import DEFAULT_TAGS, Action

PAD, BOS, EOS, OBS, RAT, END_RAT, SUM = "<pad>", "<bos>", "<eos>", "<obs>", "<rat>", "</rat>", "<sum>"
SPECIALS = (PAD, BOS, EOS, OBS, RAT, END_RAT, SUM)
ACTION_TOKENS = tuple(f"<{a.name}>" for a in Action)


class Seg(enum.IntEnum):
    INSTRUCTION = 0
    OBS_MARK = 1
    RATIONALE = 2
    ACTION = 3
    CAPTION = 4
    SUMMARY = 5


class VocabError(KeyError):
    pass


class Vocab:
    def __init__(self, words: Iterable[str]):
        self.tokens: list[str] = list(SPECIALS) + list(ACTION_TOKENS) + [w for w in words if w not in SPECIALS]
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate vocabulary entries")
        self.action_ids = [self.index[t] for t in ACTION_TOKENS]
        self.pad, self.bos, self.eos = self.index[PAD], self.index[BOS], self.index[EOS]
        self.obs, self.rat, self.end_rat, self.sum = self.index[OBS], self.index[RAT], self.index[END_RAT], self.index[SUM]

    @classmethod
    def from_tags(cls, tag_vocab: Sequence[str] = DEFAULT_TAGS) -> "Vocab":
        return cls(grammar_words(tag_vocab))

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, text: str) -> list[int]:
        try:
            return [self.index[w] for w in text.split()]
        except KeyError as err:
            raise VocabError(f"word {err.args[0]!r} is not in the vocabulary") from None

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.tokens[i] for i in ids)

    def action_id(self, a: Action) -> int:
        return self.action_ids[int(a)]

    def to_list(self) -> list[str]:
        return list(self.tokens)

    @classmethod
    def from_list(cls, tokens: Sequence[str]) -> "Vocab":
        head = list(SPECIALS) + list(ACTION_TOKENS)
        if list(tokens[: len(head)]) != head:
            raise VocabError("vocabulary does not start with the expected special tokens")
        return cls(tokens[len(head):])


@dataclass
class TokenStream:
    """Token ids with, per token, the index of the latest observation (0 = none)."""

    tokens: list[int] = field(default_factory=list)
    obs_index: list[int] = field(default_factory=list)
    segments: list[int] = field(default_factory=list)

    @property
    def n_obs(self) -> int:
        return self.obs_index[-1] if self.obs_index else 0

    def __len__(self) -> int:
        return len(self.tokens)

    def append(self, tok: int, seg: Seg) -> None:
        t = self.n_obs + (1 if seg is Seg.OBS_MARK else 0)
        self.tokens.append(tok)
        self.obs_index.append(t)
        self.segments.append(int(seg))

    def extend(self, toks: Iterable[int], seg: Seg) -> None:
        for t in toks:
            self.append(t, seg)

    def copy(self) -> "TokenStream":
        return TokenStream(list(self.tokens), list(self.obs_index), list(self.segments))

    def check(self) -> None:
        prev = 0
        for tok_obs, seg in zip(self.obs_index, self.segments):
            step = tok_obs - prev
            if seg == Seg.OBS_MARK and step != 1:
                raise ValueError("observation marker must advance obs_index by one")
            if seg != Seg.OBS_MARK and step != 0:
                raise ValueError("obs_index may only advance at observation markers")
            prev = tok_obs


def prompt_stream(vocab: Vocab, instruction: str) -> TokenStream:
    s = TokenStream()
    s.append(vocab.bos, Seg.INSTRUCTION)
    s.extend(vocab.encode(instruction), Seg.INSTRUCTION)
    return s


def caption_stream(vocab: Vocab, prompt: str, caption: str) -> TokenStream:
    s = prompt_stream(vocab, prompt)
    s.append(vocab.obs, Seg.OBS_MARK)
    s.extend(vocab.encode(caption), Seg.CAPTION)
    s.append(vocab.eos, Seg.CAPTION)
    return s


def route_stream(
    vocab: Vocab,
    instruction: str,
    actions: Sequence[Action],
    summary: str | None = None,
    rationales: dict[int, str] | None = None,
) -> TokenStream:
    """``[bos] I ([obs] ([rat] R [/rat])? a)* ([sum] s [eos])?``.

    ``rationales`` maps action index to rationale text.
    """
    s = prompt_stream(vocab, instruction)
    rationales = rationales or {}
    for k, a in enumerate(actions):
        s.append(vocab.obs, Seg.OBS_MARK)
        if k in rationales:
            s.append(vocab.rat, Seg.RATIONALE)
            s.extend(vocab.encode(rationales[k]), Seg.RATIONALE)
            s.append(vocab.end_rat, Seg.RATIONALE)
        s.append(vocab.action_id(a), Seg.ACTION)
    if summary is not None:
        s.append(vocab.sum, Seg.SUMMARY)
        s.extend(vocab.encode(summary), Seg.SUMMARY)
        s.append(vocab.eos, Seg.SUMMARY)
    return s

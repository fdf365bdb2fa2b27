"""Resolution-annotated prompts.

Grammar::

    prompt ::= term (WS term)*
    term   ::= word | pseudo
    pseudo ::= "<" name annot? ">"
    annot  ::= "|" num "|" | "(" num ")" | "[" num "]"
    num    ::= decimal in [0, 1] (has a ".") | integer bucket index in [0, T-1]

``|t|`` selects the fixed policy, ``(t)`` the semi resolution-dependent
policy and ``[t]`` the fully resolution-dependent one.  An integer ``k``
means the center of bucket k, ``(k + 0.5) / T``.  A bare ``<name>`` is
``<name[0.0]>``.  Words are runs of non-space characters other than
``< > ( ) [ ] |``; surrounding whitespace is ignored.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Iterable, Mapping, Union

import numpy as np

from .conditioning import MultiResEmbeddingSet, embed_sequence, encode
from .diffusion import NULL_ID, ModelParams
from .errors import LookupFailure, MrtiError
from .samplers import ConditioningPolicy, PolicyKind, resolve_policy

_OPEN = {"|": ("|", PolicyKind.FIXED), "(": (")", PolicyKind.SEMI), "[": ("]", PolicyKind.FULL)}
_CLOSE_FOR = {kind: (o, c) for o, (c, kind) in _OPEN.items()}
_NAME_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_\-]*")
_DECIMAL_RE = re.compile(r"^(\d+\.\d*|\.\d+)$")
_INT_RE = re.compile(r"^\d+$")
_WORD_RE = re.compile(r"^[^\s<>()\[\]|]+$")


class PromptError(MrtiError, ValueError):
    """Syntax or name-resolution error, with the byte offset where it occurred."""

    def __init__(self, offset: int, reason: str):
        super().__init__(f"byte {offset}: {reason}")
        self.offset = offset
        self.reason = reason


@dataclass(frozen=True)
class Word:
    text: str


@dataclass(frozen=True)
class Pseudo:
    name: str
    policy: ConditioningPolicy


Node = Union[Word, Pseudo]


def _bucket_counts(registry, T):
    if isinstance(registry, Mapping):
        out = {}
        for name, value in registry.items():
            if isinstance(value, MultiResEmbeddingSet):
                out[name] = value.T if T is None else T
            else:
                out[name] = T if T is not None else int(value)
        return out
    if T is None:
        raise ValueError("T is required when the registry is a plain list of names")
    return {name: T for name in registry}


def parse(prompt: str, registry: Union[Iterable[str], Mapping], T: int | None = None) -> list[Node]:
    """Parse a prompt into Word and Pseudo nodes.

    ``registry`` is either the known pseudo-word names (with ``T`` given) or
    a mapping name -> embedding set (or bucket count).
    """
    buckets = _bucket_counts(registry, T)
    text = prompt

    def boff(i: int) -> int:
        return len(text[:i].encode("utf-8"))

    nodes: list[Node] = []
    matches = list(re.finditer(r"\S+", text))
    if not matches:
        raise PromptError(0, "empty prompt")
    for m in matches:
        chunk, start = m.group(0), m.start()
        if chunk[0] != "<":
            if _WORD_RE.match(chunk):
                nodes.append(Word(chunk))
                continue
            bad = next(i for i, ch in enumerate(chunk) if ch in "<>()[]|")
            raise PromptError(boff(start + bad), f"unbalanced bracket {chunk[bad]!r} outside a pseudo-word")
        nodes.append(_parse_pseudo(chunk, start, boff, buckets))
    return nodes


def _parse_pseudo(chunk: str, start: int, boff, buckets: Mapping[str, int]) -> Pseudo:
    nm = _NAME_RE.match(chunk, 1)
    if nm is None:
        raise PromptError(boff(start + 1), "expected a pseudo-word name after '<'")
    name = nm.group(0)
    pos = nm.end()
    policy = None
    if pos < len(chunk) and chunk[pos] in _OPEN:
        open_ch = chunk[pos]
        close_ch, kind = _OPEN[open_ch]
        end = chunk.find(close_ch, pos + 1)
        if end < 0:
            stray = next((i for i in range(pos + 1, len(chunk)) if chunk[i] in ")]|>"), None)
            if stray is not None and chunk[stray] != ">":
                raise PromptError(boff(start + stray),
                                  f"unbalanced brackets: {open_ch!r} closed by {chunk[stray]!r}")
            raise PromptError(boff(start + pos), f"unbalanced {open_ch!r} in annotation")
        num = chunk[pos + 1:end]
        other = next((i for i, ch in enumerate(num) if ch in "<>()[]|"), None)
        if other is not None:
            raise PromptError(boff(start + pos + 1 + other), f"unbalanced brackets: unexpected {num[other]!r}")
        if name not in buckets:
            raise PromptError(boff(start + 1), f"unknown pseudo-word {name!r}")
        t = _parse_number(num, buckets[name], boff(start + pos + 1))
        policy = ConditioningPolicy(kind, t)
        pos = end + 1
    if pos >= len(chunk) or chunk[pos] != ">":
        if pos < len(chunk) and chunk[pos] in ")]|":
            raise PromptError(boff(start + pos), f"unbalanced {chunk[pos]!r}")
        if pos < len(chunk):
            raise PromptError(boff(start + pos), f"malformed annotation starting at {chunk[pos]!r}")
        raise PromptError(boff(start), "unbalanced '<': missing '>'")
    if pos + 1 != len(chunk):
        raise PromptError(boff(start + pos + 1), "unexpected text after '>'")
    if name not in buckets:
        raise PromptError(boff(start + 1), f"unknown pseudo-word {name!r}")
    if policy is None:
        policy = ConditioningPolicy(PolicyKind.FULL, 0.0)
    return Pseudo(name, policy)


def _parse_number(num: str, T: int, offset: int) -> float:
    if _DECIMAL_RE.match(num):
        t = float(num)
        if not 0.0 <= t <= 1.0:
            raise PromptError(offset, f"resolution {num} outside [0, 1]")
        return t
    if _INT_RE.match(num):
        k = int(num)
        if not 0 <= k <= T - 1:
            raise PromptError(offset, f"bucket index {k} outside [0, {T - 1}]")
        return (k + 0.5) / T
    raise PromptError(offset, f"malformed annotation number {num!r}")


def format_time(t: float) -> str:
    """Shortest decimal (always with a '.') that reads back as ``t``."""
    return np.format_float_positional(float(t), unique=True, trim="0")


def render(ast: Iterable[Node]) -> str:
    parts = []
    for node in ast:
        if isinstance(node, Word):
            parts.append(node.text)
        else:
            kind = node.policy.kind
            if kind not in _CLOSE_FOR:
                raise ValueError(f"policy {kind.value!r} has no prompt syntax")
            o, c = _CLOSE_FOR[kind]
            parts.append(f"<{node.name}{o}{format_time(node.policy.t_fixed)}{c}>")
    return " ".join(parts)


@dataclass(frozen=True)
class _Slot:
    position: int
    emb_set: MultiResEmbeddingSet
    policy: ConditioningPolicy


class PromptSchedule:
    """A compiled prompt: maps sampling time to embedding rows and a conditioning vector."""

    def __init__(self, params: ModelParams, entries: list, slots: list[_Slot],
                 uncond_full_prompt: bool = False, bucketed_lookup: bool = False):
        self.params = params
        self.entries = entries
        self.slots = slots
        self.uncond_full_prompt = uncond_full_prompt
        self.bucketed_lookup = bucketed_lookup
        self._null_row = params["token_table"][NULL_ID]

    def _resolved(self, t: float):
        vecs, tags = [], []
        for slot in self.slots:
            v, tag = resolve_policy(slot.emb_set, slot.policy, t, self._null_row, self.bucketed_lookup)
            vecs.append(v)
            tags.append(tag)
        return vecs, tags

    def _all_null(self, tags) -> bool:
        return self.uncond_full_prompt and "null" in tags

    def resolve(self, t: float) -> np.ndarray:
        vecs, tags = self._resolved(t)
        if self._all_null(tags):
            return embed_sequence(self.params["token_table"], [], self.params.config.max_len)
        seq = list(self.entries)
        for slot, v in zip(self.slots, vecs):
            seq[slot.position] = v
        return embed_sequence(self.params["token_table"], seq, self.params.config.max_len)

    def sources(self, t: float) -> list[str]:
        _, tags = self._resolved(t)
        if self._all_null(tags):
            return ["null"] * len(tags)
        return tags

    def conditioning(self, t: float) -> np.ndarray:
        return encode(self.resolve(t), self.params)

    def to_json(self) -> dict:
        Ts = {s.emb_set.T for s in self.slots}
        return {
            "tokens": [e if isinstance(e, int) else None for e in self.entries],
            "slots": [
                {"name": s.emb_set.name, "position": s.position, "policy": s.policy.kind.value,
                 "t_fixed": s.policy.t_fixed, "T": s.emb_set.T}
                for s in self.slots
            ],
            "T": Ts.pop() if len(Ts) == 1 else None,
            "uncond_full_prompt": self.uncond_full_prompt,
            "bucketed_lookup": self.bucketed_lookup,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)


def compile_prompt(ast: Iterable[Node], registry: Mapping[str, MultiResEmbeddingSet], params: ModelParams,
                   uncond_full_prompt: bool = False, bucketed_lookup: bool = False) -> PromptSchedule:
    vocab = {w: i for i, w in enumerate(params.config.vocab)}
    entries: list = []
    slots: list[_Slot] = []
    for i, node in enumerate(ast):
        if isinstance(node, Word):
            try:
                entries.append(vocab[node.text.lower()])
            except KeyError:
                raise LookupFailure(f"unknown word {node.text!r}") from None
        else:
            if node.name not in registry:
                raise LookupFailure(f"unresolvable pseudo-word {node.name!r}")
            emb_set = registry[node.name]
            if emb_set.d != params.config.embed_dim:
                raise LookupFailure(f"pseudo-word {node.name!r} has dimension {emb_set.d}, "
                                    f"model expects {params.config.embed_dim}")
            entries.append(None)
            slots.append(_Slot(i, emb_set, node.policy))
    if len(entries) > params.config.max_len:
        raise LookupFailure(f"prompt has {len(entries)} tokens, model accepts {params.config.max_len}")
    return PromptSchedule(params, entries, slots, uncond_full_prompt, bucketed_lookup)


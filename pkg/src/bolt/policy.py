"""Initialization policies: context -> candidate solutions.

Two backends share one interface. :class:`NGramPolicy` is a context-bucketed,
additively smoothed n-gram trained by counting (the maximum-likelihood
solution of the token-level NLL objective). :class:`RemotePolicy` forwards
prompts to any chat-completion endpoint. Everything a backend emits goes
through :func:`sanitize` before it can become a candidate.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from importlib import resources
from typing import Optional, Sequence, Union

import httpx
import numpy as np

from .core import Candidate, Domain
from .encode import (
    AMINO_ACIDS,
    EditedSeq,
    InvalidPlan,
    JoinOp,
    JoinPlan,
    repair,
    strip_plan_text,
    strip_seq_text,
)
from .oracle import MAX_RELATIONS, QueryTaskSpec, fallback_candidates, parse_query_context

log = logging.getLogger(__name__)

BOS = "<s>"
END = "</s>"
OP_TOKENS = ("b0", "b1")
QUERY_VOCAB = tuple(str(i) for i in range(MAX_RELATIONS)) + OP_TOKENS + (END,)
SEQ_VOCAB = tuple(AMINO_ACIDS) + (END,)

OVERSAMPLE = 3


class UntrainedPolicy(RuntimeError):
    pass


class UnknownToken(ValueError):
    pass


class EmptyDataset(ValueError):
    pass


class MixedDomains(ValueError):
    pass


class AuthMissing(RuntimeError):
    pass


class RemoteError(RuntimeError):
    def __init__(self, status: Optional[int], excerpt: str):
        super().__init__(f"remote endpoint failed (status={status}): {excerpt}")
        self.status = status
        self.excerpt = excerpt


class RemoteTimeout(RemoteError):
    pass


# -- prompts and records ----------------------------------------------------------


@lru_cache(maxsize=None)
def system_prompt(domain: Domain) -> str:
    name = f"{Domain(domain).value}_system.txt"
    return resources.files("bolt.prompts").joinpath(name).read_text(encoding="utf-8").strip()


def domain_of_system(system: str) -> Domain:
    for d in Domain:
        if system == system_prompt(d):
            return d
    raise ValueError("system prompt does not match any domain template")


@dataclass(frozen=True)
class PolicyPrompt:
    system: str
    user: str


def build_prompt(domain: Domain, context: str) -> PolicyPrompt:
    return PolicyPrompt(system_prompt(Domain(domain)), context)


@dataclass(frozen=True)
class FinetuneRecord:
    system: str
    user: str
    assistant: str

    def to_dict(self) -> dict:
        return {
            "messages": [
                {"role": "system", "content": self.system},
                {"role": "user", "content": self.user},
                {"role": "assistant", "content": self.assistant},
            ]
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FinetuneRecord":
        msgs = {m["role"]: m["content"] for m in d["messages"]}
        return cls(msgs["system"], msgs["user"], msgs["assistant"])

    @classmethod
    def for_candidate(cls, domain: Domain, context: str, cand: Candidate) -> "FinetuneRecord":
        return cls(system_prompt(Domain(domain)), context, cand.to_text())


# -- tokenization -----------------------------------------------------------------
#
# Plans are tokenized interleaved: o0 o1 b0 o2 b1 ... so every operator token
# directly follows the relation it joins. Text stays in the "o.. | b.." format.


def tokenize(domain: Domain, text: str) -> list[str]:
    if domain == Domain.SEQUENCE:
        return list(text)
    left, _, right = text.partition("|")
    rels, bits = left.split(), right.split()
    toks = rels[:1]
    for i, rel in enumerate(rels[1:]):
        toks.append(rel)
        if i < len(bits):
            toks.append(f"b{bits[i]}")
    toks += [f"b{b}" for b in bits[max(len(rels) - 1, 0):]]
    return toks


def detokenize(domain: Domain, tokens: Sequence[str]) -> str:
    tokens = [t for t in tokens if t != END]
    if domain == Domain.SEQUENCE:
        return "".join(tokens)
    rels = [t for t in tokens if t not in OP_TOKENS]
    bits = [t[1] for t in tokens if t in OP_TOKENS]
    return f"{' '.join(rels)} | {' '.join(bits)}"


def vocab_for(domain: Domain) -> tuple[str, ...]:
    return QUERY_VOCAB if Domain(domain) == Domain.QUERY else SEQ_VOCAB


# -- context buckets --------------------------------------------------------------


@dataclass(frozen=True)
class _ContextInfo:
    """Coarse, bucketable features of one task context."""

    domain: Domain
    length: int  # relations for plans, seed length for sequences
    buckets: tuple[str, ...] = ()  # query: finest first, shared by all steps
    seed: str = ""

    def step_buckets(self, step: int) -> tuple[str, ...]:
        if self.domain == Domain.QUERY:
            return self.buckets
        s = self.seed
        prev = s[step - 1] if 0 < step <= len(s) else "^"
        cur = s[step] if step < len(s) else "$"
        return (f"{prev}{cur}", cur, "*")

    @property
    def n_tokens(self) -> int:
        return 2 * self.length - 1 if self.domain == Domain.QUERY else self.length


def context_info(domain: Domain, context: str) -> _ContextInfo:
    if domain == Domain.QUERY:
        cards = parse_query_context(context)
        n = len(cards)
        if n == 0:
            raise ValueError("query context lists no relations")
        smallest = [str(i) for i in sorted(range(n), key=lambda i: (cards[i], i))[:3]]
        buckets = tuple(f"n{n}|{','.join(smallest[:k])}" for k in range(len(smallest), 0, -1))
        return _ContextInfo(domain, n, buckets + (f"n{n}", "*"))
    seed = strip_seq_text(context.strip())
    return _ContextInfo(domain, len(seed), (), seed)


def _allowed(info: _ContextInfo, step: int, emitted: Sequence[str], vocab: tuple[str, ...]) -> list[int]:
    """Vocabulary indices the output grammar allows at ``step``."""
    if step >= info.n_tokens:
        return [vocab.index(END)]
    if info.domain == Domain.SEQUENCE:
        return list(range(len(AMINO_ACIDS)))
    if step >= 2 and step % 2 == 0:
        return [vocab.index(t) for t in OP_TOKENS]
    used = set(emitted)
    return [i for i in range(info.length) if str(i) not in used]


# -- n-gram policy ----------------------------------------------------------------


def _state_key(bucket: str, hist: Sequence[str]) -> str:
    return f"{bucket}\t{' '.join(hist)}"


@dataclass(frozen=True, eq=False)
class NGramPolicy:
    domain: Domain
    order: int = 3
    alpha: float = 0.5
    counts: dict = field(default_factory=dict)  # state key -> {token: count}
    n_records: int = 0
    epochs: int = 1
    constrained: bool = True
    name: str = "BOLT-0"

    def __post_init__(self):
        object.__setattr__(self, "domain", Domain(self.domain))
        if self.order < 1 or self.alpha <= 0:
            raise ValueError("need order >= 1 and alpha > 0")
        object.__setattr__(self, "_cache", {})

    @property
    def vocab(self) -> tuple[str, ...]:
        return vocab_for(self.domain)

    @property
    def trained(self) -> bool:
        return bool(self.counts)

    def _hist(self, tokens: Sequence[str]) -> tuple[str, ...]:
        h = self.order - 1
        padded = [BOS] * h + list(tokens)
        return tuple(padded[len(padded) - h:]) if h else ()

    def probs(self, info: _ContextInfo, tokens: Sequence[str]) -> np.ndarray:
        """Smoothed next-token distribution over ``vocab``.

        Interpolated (Witten-Bell style) smoothing: every seen state shrinks
        its counts toward the distribution of the next coarser state, with
        pseudo-count ``alpha`` times the number of distinct tokens seen there.
        States are ordered coarse to fine by history length, then by context
        bucket; the root is uniform.
        """
        hist = self._hist(tokens)
        buckets = info.step_buckets(len(tokens))
        key = (buckets, hist)
        p = self._cache.get(key)
        if p is None:
            p = self._lookup(buckets, hist)
            p.flags.writeable = False
            self._cache[key] = p
        return p

    def _lookup(self, buckets, hist, allowed: Optional[Sequence[int]] = None) -> np.ndarray:
        """Interpolate from the uniform root up to the finest seen state.

        With ``allowed``, counts outside it are dropped before smoothing, so
        the result is the model restricted to tokens the grammar can emit and
        states with no evidence about those tokens are skipped.
        """
        vocab = self.vocab
        mask = np.ones(len(vocab), dtype=bool)
        if allowed is not None:
            mask = np.zeros(len(vocab), dtype=bool)
            mask[list(allowed)] = True
        p = mask / mask.sum()
        for h in range(len(hist) + 1):
            sub = hist[len(hist) - h:]
            for b in reversed(buckets):
                row = self.counts.get(_state_key(b, sub))
                if not row:
                    continue
                c = np.array([row.get(t, 0) for t in vocab], dtype=float) * mask
                kinds = int(np.count_nonzero(c))
                if kinds:
                    prior = self.alpha * kinds
                    p = (c + prior * p) / (c.sum() + prior)
        return p

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "constrained": self.constrained,
            "counts": self.counts,
            "domain": self.domain.value,
            "epochs": self.epochs,
            "n_records": self.n_records,
            "name": self.name,
            "order": self.order,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NGramPolicy":
        counts = {k: {t: int(c) for t, c in row.items()} for k, row in d["counts"].items()}
        return cls(
            Domain(d["domain"]), int(d["order"]), float(d["alpha"]), counts,
            int(d["n_records"]), int(d["epochs"]), bool(d["constrained"]), d["name"],
        )


def train_ngram(records: Sequence[FinetuneRecord], epochs: int = 1, order: int = 3,
                alpha: float = 0.5, name: Optional[str] = None, constrained: bool = True) -> NGramPolicy:
    """Count-based maximum-likelihood fit.

    Counts are exact sufficient statistics, so a second pass over the data
    changes nothing; ``epochs`` is validated and recorded only.
    """
    if not records:
        raise EmptyDataset("cannot train on an empty dataset")
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    systems = {r.system for r in records}
    if len(systems) > 1:
        raise MixedDomains("records come from more than one domain")
    domain = domain_of_system(next(iter(systems)))
    vocab = set(vocab_for(domain))
    counts: dict[str, dict[str, int]] = {}
    proto = NGramPolicy(domain, order, alpha)
    for rec in records:
        info = context_info(domain, rec.user)
        toks = tokenize(domain, rec.assistant) + [END]
        unknown = set(toks) - vocab
        if unknown:
            raise UnknownToken(f"tokens outside the vocabulary: {sorted(unknown)}")
        for t, tok in enumerate(toks):
            hist = proto._hist(toks[:t])
            for b in info.step_buckets(t):
                for h in range(len(hist) + 1):
                    row = counts.setdefault(_state_key(b, hist[len(hist) - h:]), {})
                    row[tok] = row.get(tok, 0) + 1
    # canonical ordering keeps serialized policies byte-stable
    counts = {k: dict(sorted(counts[k].items())) for k in sorted(counts)}
    return NGramPolicy(domain, order, alpha, counts, len(records), epochs, constrained,
                       name or f"ngram-{len(records)}")


def nll(policy: NGramPolicy, context: str, solution: str) -> float:
    """Negative log-likelihood (nats) of the solution tokens given the context."""
    info = context_info(policy.domain, context)
    toks = tokenize(policy.domain, solution)
    vocab = policy.vocab
    index = {t: i for i, t in enumerate(vocab)}
    total = 0.0
    for t, tok in enumerate(toks):
        if tok not in index:
            raise UnknownToken(f"token {tok!r} is not in the {policy.domain.value} vocabulary")
        total -= math.log(policy.probs(info, toks[:t])[index[tok]])
    return total


def _step_dist(policy: NGramPolicy, info: _ContextInfo, toks: Sequence[str], temperature: float):
    """Greedy index (T = 0) or unnormalized CDF of the masked, tempered next-token distribution."""
    query = policy.domain == Domain.QUERY
    key = ("step", info.step_buckets(len(toks)), policy._hist(toks), len(toks),
           frozenset(toks) if query and policy.constrained else None, temperature)
    out = policy._cache.get(key)
    if out is not None:
        return out
    if policy.constrained:
        allowed = _allowed(info, len(toks), toks, policy.vocab)
        p = policy._lookup(info.step_buckets(len(toks)), policy._hist(toks), allowed)
    else:
        p = policy.probs(info, toks)
    if temperature == 0:
        out = int(np.argmax(p))  # first maximum, i.e. vocabulary order
    else:
        with np.errstate(divide="ignore"):
            logits = np.log(p) / temperature
        out = np.cumsum(np.exp(logits - logits.max()))
        out.flags.writeable = False
    policy._cache[key] = out
    return out


def sample(policy: NGramPolicy, context: str, temperature: float,
           rng: Optional[np.random.Generator] = None) -> str:
    """Draw one raw completion. ``temperature=0`` is greedy decoding."""
    if temperature < 0:
        raise ValueError("temperature must be non-negative")
    if not policy.trained:
        raise UntrainedPolicy("policy has no training counts")
    if temperature > 0 and rng is None:
        raise ValueError("sampling at positive temperature needs an rng")
    info = context_info(policy.domain, context)
    vocab = policy.vocab
    end = vocab.index(END)
    max_len = 2 * info.n_tokens + 2
    toks: list[str] = []
    while len(toks) < max_len:
        dist = _step_dist(policy, info, toks, temperature)
        if temperature == 0:
            idx = dist
        else:
            idx = min(int(np.searchsorted(dist, rng.random() * dist[-1], side="right")), len(vocab) - 1)
        if idx == end:
            break
        toks.append(vocab[idx])
    return detokenize(policy.domain, toks)


# -- sanitization and proposal ---------------------------------------------------


@dataclass(frozen=True)
class Rejected:
    reason: str


def sanitize(raw: str, task) -> Union[Candidate, Rejected]:
    """Turn raw policy text into a valid candidate for ``task``, or say why not."""
    if isinstance(task, QueryTaskSpec):
        text = strip_plan_text(raw)
        try:
            plan = JoinPlan.from_text(text)
        except InvalidPlan as exc:
            return Rejected(f"unparseable plan: {exc}")
        if plan.n != task.n_relations:
            return Rejected(f"plan covers {plan.n} relations, task has {task.n_relations}")
        return plan
    seq = strip_seq_text(raw)
    if len(seq) != len(task.seed):
        return Rejected(f"length {len(seq)} != seed length {len(task.seed)}")
    return EditedSeq(repair(task.seed, seq, task.threshold), task.task_id)


@dataclass(frozen=True)
class Proposal:
    candidates: tuple
    pad_count: int
    raw_count: int


@dataclass(frozen=True)
class RemoteLLMConfig:
    endpoint_url: str
    model_name: str
    api_key_env: str = "OPENAI_API_KEY"
    temperature: float = 0.7
    max_tokens: int = 128
    n: int = 1
    timeout: float = 60.0
    max_retries: int = 3
    backoff_base: float = 1.0
    max_concurrency: int = 4


@dataclass(frozen=True)
class RemotePolicy:
    config: RemoteLLMConfig
    domain: Domain

    @property
    def name(self) -> str:
        return self.config.model_name


Policy = Union[NGramPolicy, RemotePolicy]


def _raw_samples(policy: Policy, task, count: int, temperature: float, rng):
    if isinstance(policy, RemotePolicy):
        cfg = replace(policy.config, temperature=temperature)
        yield from remote_propose(cfg, build_prompt(policy.domain, task.context_text), count)
        return
    for _ in range(count):
        yield sample(policy, task.context_text, temperature, rng)


def propose(policy: Policy, task, n: int, temperature: float,
            rng: np.random.Generator) -> Proposal:
    """Up to ``OVERSAMPLE * n`` raw draws, sanitized and de-duplicated, padded to ``n``
    with the task's fallback initializer."""
    if n < 1:
        raise ValueError("n must be >= 1")
    accepted: list = []
    seen = set()
    raw_count = 0
    for raw in _raw_samples(policy, task, OVERSAMPLE * n, temperature, rng):
        raw_count += 1
        cand = sanitize(raw, task)
        if isinstance(cand, Rejected) or cand in seen:
            continue
        accepted.append(cand)
        seen.add(cand)
        if len(accepted) == n:
            break
    pads = fallback_candidates(task, n - len(accepted), rng, exclude=seen)
    return Proposal(tuple(accepted + pads), len(pads), raw_count)


# -- remote chat-completion client ------------------------------------------------


def _api_key(cfg: RemoteLLMConfig) -> str:
    key = os.environ.get(cfg.api_key_env, "")
    if not key:
        raise AuthMissing(f"environment variable {cfg.api_key_env} is not set")
    return key


def remote_propose(cfg: RemoteLLMConfig, prompt: PolicyPrompt, n: int,
                   client: Optional[httpx.Client] = None) -> list[str]:
    """One chat-completion request for ``n`` choices; returns the raw message texts."""
    key = _api_key(cfg)
    body = {
        "model": cfg.model_name,
        "messages": [
            {"role": "system", "content": prompt.system},
            {"role": "user", "content": prompt.user},
        ],
        "temperature": cfg.temperature,
        "n": n,
        "max_tokens": cfg.max_tokens,
    }
    headers = {"Authorization": f"Bearer {key}", "Content-Type": "application/json"}
    own = client is None
    client = client or httpx.Client(timeout=cfg.timeout)
    try:
        for attempt in range(cfg.max_retries + 1):
            try:
                resp = client.post(cfg.endpoint_url, json=body, headers=headers)
            except httpx.TimeoutException as exc:
                if attempt == cfg.max_retries:
                    raise RemoteTimeout(None, str(exc)) from None
            except httpx.HTTPError as exc:
                raise RemoteError(None, str(exc)) from None
            else:
                if resp.status_code == 429 or resp.status_code >= 500:
                    if attempt == cfg.max_retries:
                        raise RemoteError(resp.status_code, resp.text[:200])
                elif resp.status_code != 200:
                    raise RemoteError(resp.status_code, resp.text[:200])
                else:
                    return _parse_choices(resp)
            delay = cfg.backoff_base * 2**attempt
            log.warning("remote call failed (attempt %d), retrying in %.2fs", attempt + 1, delay)
            time.sleep(delay)
    finally:
        if own:
            client.close()
    raise AssertionError("unreachable")


def _parse_choices(resp: httpx.Response) -> list[str]:
    try:
        payload = resp.json()
        return [str(c["message"]["content"]) for c in payload["choices"]]
    except (json.JSONDecodeError, ValueError, KeyError, TypeError) as exc:
        raise RemoteError(resp.status_code, f"malformed response ({exc}): {resp.text[:200]}") from None


def remote_propose_many(cfg: RemoteLLMConfig, prompts: Sequence[PolicyPrompt], n: int) -> list[list[str]]:
    """Concurrent :func:`remote_propose` over many prompts, at most ``max_concurrency`` in flight."""
    _api_key(cfg)
    with httpx.Client(timeout=cfg.timeout) as client, \
            ThreadPoolExecutor(max_workers=max(1, cfg.max_concurrency)) as pool:
        return list(pool.map(lambda p: remote_propose(cfg, p, n, client), prompts))

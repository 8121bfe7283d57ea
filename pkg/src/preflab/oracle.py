"""Brute-force verification of the theory on enumerable token spaces.

Everything here works by exhaustive enumeration of a small output space:
the Boltzmann form of the KL-constrained optimum, additive decomposition
of response-level rewards into prefix-wise ones, and the token-level
reparameterization that turns any prefix-wise reward into an
autoregressive policy whose log-ratio against the reference reproduces
the reward (up to a per-context shift).

Spaces are hard-capped at vocab size 6 and length 5, which keeps typical
certifications sub-second (the very largest fixed-length space takes a few
seconds). Variable-length spaces are realized as EOS-terminated sequences,
which makes the output space prefix-free (no response is a proper prefix
of another); the canonical terminal-mass decomposition is only
well-defined on prefix-free spaces.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .autodiff import log_softmax_values, logsumexp_values
from .errors import ValidationError
from .lm import NGramPolicy, TokenSeq, Vocab, seq_logprob, token_logprobs

MAX_VOCAB = 6
MAX_LEN = 5

TOLERANCES = {
    "boltzmann": 1e-12,
    "optimality": 1e-12,
    "decompose": 1e-12,
    "reparam": 1e-10,
    "theorem1": 1e-9,
}


@dataclass(frozen=True)
class EnumSpace:
    """A fully enumerated output space plus the contexts that reach it."""

    vocab: Vocab
    max_len: int
    mode: str  # "eos" (variable length, EOS-terminated) or "fixed"
    sequences: tuple[TokenSeq, ...]
    contexts: tuple[TokenSeq, ...]

    @classmethod
    def build(cls, vocab_size: int, max_len: int, mode: str = "eos") -> "EnumSpace":
        if not (3 <= vocab_size <= MAX_VOCAB):
            raise ValidationError(
                f"vocab size must be in [3, {MAX_VOCAB}], got {vocab_size}"
            )
        if not (1 <= max_len <= MAX_LEN):
            raise ValidationError(f"max length must be in [1, {MAX_LEN}], got {max_len}")
        vocab = Vocab(vocab_size)
        if mode == "eos":
            interiors = tuple(t for t in range(vocab_size) if t != vocab.eos)
            sequences = tuple(
                body + (vocab.eos,)
                for t in range(1, max_len + 1)
                for body in itertools.product(interiors, repeat=t - 1)
            )
            contexts = tuple(
                ctx
                for t in range(max_len)
                for ctx in itertools.product(interiors, repeat=t)
            )
        elif mode == "fixed":
            sequences = tuple(itertools.product(range(vocab_size), repeat=max_len))
            contexts = tuple(
                ctx
                for t in range(max_len)
                for ctx in itertools.product(range(vocab_size), repeat=t)
            )
        else:
            raise ValidationError(f"unknown space mode {mode!r}")
        if not sequences:
            raise ValidationError("empty output space")
        return cls(vocab, max_len, mode, sequences, contexts)

    def scoring_domain(self) -> tuple[TokenSeq, ...]:
        """Every context extended by every token: the prefixes a prefix-wise
        reward must score."""
        v = self.vocab.size
        return tuple(ctx + (t,) for ctx in self.contexts for t in range(v))

    def prefix_closure(self) -> set[TokenSeq]:
        """All prefixes (including the empty one) of the output space."""
        out: set[TokenSeq] = {()}
        for y in self.sequences:
            for i in range(1, len(y) + 1):
                out.add(y[:i])
        return out


def ref_logmass(space: EnumSpace, ref, prompt: TokenSeq = ()) -> np.ndarray:
    """Chain-rule log mass of every enumerated sequence under the reference."""
    return np.array([seq_logprob(ref, prompt, y) for y in space.sequences])


def random_reward(space: EnumSpace, rng, scale: float = 1.0) -> dict:
    return {y: float(scale * rng.standard_normal()) for y in space.sequences}


def random_prefix_reward(space: EnumSpace, rng, scale: float = 1.0) -> dict:
    return {p: float(scale * rng.standard_normal()) for p in space.scoring_domain()}


# ---------------------------------------------------------------------------
# Boltzmann distribution and the KL-constrained objective
# ---------------------------------------------------------------------------


def boltzmann_distribution(
    space: EnumSpace,
    reward: dict,
    ref,
    beta: float,
    prompt: TokenSeq = (),
    logmass: np.ndarray | None = None,
) -> np.ndarray:
    """Distribution proportional to pi_ref(y) * exp(r(y) / beta) over the space.

    This is the maximizer of kl_objective; normalization is exact over the
    enumerated sequences. ``logmass`` may carry a precomputed
    ref_logmass(space, ref, prompt).
    """
    if beta <= 0:
        raise ValidationError(f"beta must be positive, got {beta}")
    if logmass is None:
        logmass = ref_logmass(space, ref, prompt)
    logw = logmass + np.array([reward[y] for y in space.sequences]) / beta
    return np.exp(logw - logsumexp_values(logw))


def kl_objective(
    space: EnumSpace,
    policy: np.ndarray,
    reward: dict,
    ref,
    beta: float,
    prompt: TokenSeq = (),
    logmass: np.ndarray | None = None,
) -> float:
    """Expected reward minus beta times KL(policy || reference), exactly.

    ``logmass`` may carry precomputed ref_logmass(space, ref, prompt) when
    the objective is evaluated for many policies on one space.
    """
    policy = np.asarray(policy, dtype=np.float64)
    if policy.shape != (len(space.sequences),):
        raise ValidationError(
            f"policy has shape {policy.shape}, expected ({len(space.sequences)},)"
        )
    if abs(float(np.sum(policy)) - 1.0) > 1e-9:
        raise ValidationError(
            f"policy mass {float(np.sum(policy))!r} not normalized within 1e-9"
        )
    if np.any(policy < 0):
        raise ValidationError("policy has negative probabilities")
    r = np.array([reward[y] for y in space.sequences])
    if logmass is None:
        logmass = ref_logmass(space, ref, prompt)
    live = policy > 0
    kl = float(np.sum(policy[live] * (np.log(policy[live]) - logmass[live])))
    return float(np.sum(policy * r)) - beta * kl


def random_policies(space: EnumSpace, n: int, rng) -> np.ndarray:
    """Full-support random distributions: normalized exponentials of
    Gaussian logits, one row per draw."""
    logits = rng.standard_normal((n, len(space.sequences)))
    return np.exp(log_softmax_values(logits, axis=1))


def kl_objective_batch(
    space: EnumSpace,
    policies: np.ndarray,
    reward: dict,
    ref,
    beta: float,
    prompt: TokenSeq = (),
    logmass: np.ndarray | None = None,
) -> np.ndarray:
    """kl_objective of many full-support policy rows at once.

    Agrees with kl_objective row by row; exists so sweeps over thousands of
    policies stay fast on larger spaces.
    """
    policies = np.asarray(policies, dtype=np.float64)
    if policies.ndim != 2 or policies.shape[1] != len(space.sequences):
        raise ValidationError(
            f"policies have shape {policies.shape}, expected (n, {len(space.sequences)})"
        )
    if np.any(np.abs(np.sum(policies, axis=1) - 1.0) > 1e-9):
        raise ValidationError("a policy row is not normalized within 1e-9")
    if np.any(policies <= 0):
        raise ValidationError("batch objective requires strictly positive rows")
    r = np.array([reward[y] for y in space.sequences])
    if logmass is None:
        logmass = ref_logmass(space, ref, prompt)
    kl = np.sum(policies * (np.log(policies) - logmass[None, :]), axis=1)
    return policies @ r - beta * kl


# ---------------------------------------------------------------------------
# additive decomposition
# ---------------------------------------------------------------------------


def additive_decompose(
    space: EnumSpace,
    reward: dict,
    scheme: str = "terminal",
    ref=None,
    beta: float | None = None,
    prompt: TokenSeq = (),
) -> dict:
    """Split a response-level reward into per-prefix contributions.

    schemes:
      terminal    - all mass on the final prefix: r*(y_<=i) = 0 for interior
                    prefixes and r(y) at the full response (canonical; the
                    round trip is exact).
      soft_value  - terminal mass re-shifted by a backward soft-value
                    recursion against (ref, beta). Each prefix gains
                    V(prefix) - V(parent), which telescopes along any
                    response, so the one-step reparameterization of this
                    decomposition has an identically-zero per-context shift
                    and reproduces r up to the single constant V(empty).
    """
    terminal = {key: 0.0 for key in space.scoring_domain()}
    for y in space.sequences:
        terminal[y] = float(reward[y])
    if scheme == "terminal":
        return terminal
    if scheme != "soft_value":
        raise ValidationError(f"unknown decomposition scheme {scheme!r}")
    if ref is None or beta is None:
        raise ValidationError("soft_value decomposition needs ref and beta")

    value: dict[TokenSeq, float] = {}
    v = space.vocab.size
    for ctx in sorted(space.contexts, key=len, reverse=True):
        row = ref.conditional_row(prompt, ctx)
        scores = np.array(
            [
                row[t] + (terminal[ctx + (t,)] + value.get(ctx + (t,), 0.0)) / beta
                for t in range(v)
            ]
        )
        value[ctx] = beta * logsumexp_values(scores)
    out = {}
    for ctx in space.contexts:
        for t in range(v):
            key = ctx + (t,)
            out[key] = terminal[key] + value.get(key, 0.0) - value[ctx]
    return out


def uniform_decomposition(reward: dict) -> dict:
    """Per-response even split: each of the T' prefixes of y gets r(y)/T'.

    Returned per sequence (y -> tuple of prefix values) rather than as a
    prefix-keyed table, because distinct responses sharing a prefix would
    assign it different values.
    """
    return {y: tuple(reward[y] / len(y) for _ in y) for y in reward}


def decomposition_residual(space: EnumSpace, reward: dict, rstar: dict) -> float:
    """Max |sum of prefix contributions - r(y)| over the space."""
    worst = 0.0
    for y in space.sequences:
        total = 0.0
        for i in range(1, len(y) + 1):
            total += rstar[y[:i]]
        worst = max(worst, abs(total - reward[y]))
    return worst


def energy_additivity_residual(
    space: EnumSpace,
    rstar: dict,
    ref,
    beta: float,
    prompt: TokenSeq = (),
    token_cache: dict | None = None,
) -> float:
    """Summed prefix posterior energies vs. the response-level posterior
    energy of the reward the decomposition induces.

    ``token_cache`` may map each sequence to its precomputed per-token
    reference log-probabilities.
    """
    worst = 0.0
    for y in space.sequences:
        if token_cache is not None:
            logps = token_cache[y]
        else:
            logps = token_logprobs(ref, prompt, y)
        prefix_total = 0.0
        reward_total = 0.0
        for i in range(1, len(y) + 1):
            prefix_total += -rstar[y[:i]] / beta - logps[i - 1]
            reward_total += rstar[y[:i]]
        whole = -reward_total / beta - float(np.sum(logps))
        worst = max(worst, abs(prefix_total - whole))
    return worst


# ---------------------------------------------------------------------------
# prefix-wise reparameterization
# ---------------------------------------------------------------------------


@dataclass
class ReparamResult:
    """Token-level policy induced by a prefix-wise reward.

    policy maps each context to a normalized log-probability row over the
    vocabulary; shift holds the per-context normalizer beta * log Z whose
    subtraction from the reward makes it exactly beta * log(pi / pi_ref).
    """

    policy: dict[TokenSeq, np.ndarray]
    shift: dict[TokenSeq, float]
    max_residual: float


def reparameterize(
    space: EnumSpace, rstar: dict, ref, beta: float, prompt: TokenSeq = ()
) -> ReparamResult:
    """Per-context Boltzmann policy pi(t|ctx) ~ pi_ref(t|ctx) exp(r*(ctx+t)/beta).

    The residual reports how far r* - shift lands from beta * log(pi/pi_ref)
    across every (context, token); it should sit at float rounding error.
    """
    if beta <= 0:
        raise ValidationError(f"beta must be positive, got {beta}")
    policy: dict[TokenSeq, np.ndarray] = {}
    shift: dict[TokenSeq, float] = {}
    worst = 0.0
    v = space.vocab.size
    for ctx in space.contexts:
        base = ref.conditional_row(prompt, ctx)
        rvec = np.array([rstar[ctx + (t,)] for t in range(v)])
        scores = base + rvec / beta
        lse = logsumexp_values(scores)
        row = scores - lse
        policy[ctx] = row
        shift[ctx] = beta * lse
        residual = np.max(np.abs((rvec - shift[ctx]) - beta * (row - base)))
        worst = max(worst, float(residual))
    return ReparamResult(policy=policy, shift=shift, max_residual=worst)


def table_seq_logprob(policy: dict[TokenSeq, np.ndarray], y: TokenSeq) -> float:
    """Chain-rule log probability of y under a context->row policy table."""
    total = 0.0
    for i, t in enumerate(y):
        total += policy[y[:i]][t]
    return total


def shift_invariance_residual(
    space: EnumSpace,
    rstar: dict,
    ref,
    beta: float,
    rng,
    scale: float = 1.0,
    prompt: TokenSeq = (),
) -> float:
    """Max row change of the induced policy under a random per-context shift."""
    offsets = {ctx: float(scale * rng.standard_normal()) for ctx in space.contexts}
    shifted = {key: value + offsets[key[:-1]] for key, value in rstar.items()}
    base = reparameterize(space, rstar, ref, beta, prompt)
    moved = reparameterize(space, shifted, ref, beta, prompt)
    worst = 0.0
    for ctx in space.contexts:
        worst = max(worst, float(np.max(np.abs(base.policy[ctx] - moved.policy[ctx]))))
    return worst


def reconstruction_spread(
    space: EnumSpace,
    reward: dict,
    ref,
    beta: float,
    prompt: TokenSeq = (),
    logmass: np.ndarray | None = None,
) -> float:
    """Full-pipeline check: decompose r, reparameterize, and measure how far
    beta * log(pi(y)/pi_ref(y)) - r(y) is from a single response-independent
    constant (max minus min of the deviation across the space)."""
    rstar = additive_decompose(
        space, reward, scheme="soft_value", ref=ref, beta=beta, prompt=prompt
    )
    rep = reparameterize(space, rstar, ref, beta, prompt)
    if logmass is None:
        logmass = ref_logmass(space, ref, prompt)
    devs = [
        beta * (table_seq_logprob(rep.policy, y) - logmass[i]) - reward[y]
        for i, y in enumerate(space.sequences)
    ]
    return max(devs) - min(devs)


# ---------------------------------------------------------------------------
# certificates
# ---------------------------------------------------------------------------


def _rng(seed: int, salt: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(salt,)))


class _CachedNGram(NGramPolicy):
    """Frozen n-gram with its normalized log table precomputed once.

    Lookups return bit-identical values to the base class (log-softmax is
    computed row-independently either way); this only removes repeated
    normalization work inside enumeration loops.
    """

    def __init__(self, base: NGramPolicy):
        super().__init__(base.vocab, base.order, base.params["logits"].copy(), frozen=True)
        self._table = log_softmax_values(self.params["logits"], axis=1)

    def row_logprobs(self, rows, targets):
        return self._table[
            np.asarray(rows, dtype=np.intp), np.asarray(targets, dtype=np.intp)
        ]

    def conditional_row(self, prompt, prefix):
        fill = (self.vocab.bos,) * max(self.order - 1, 0)
        history = fill + tuple(prompt) + tuple(prefix)
        context = history[len(history) - (self.order - 1) : len(history)]
        return self._table[self._context_index(context)]


def _reference(space: EnumSpace, rng) -> NGramPolicy:
    return _CachedNGram(NGramPolicy.random(space.vocab, order=2, rng=rng))


def _certificate(
    check: str, space: EnumSpace, seed: int, residual: float, passed: bool
) -> dict:
    return {
        "check": check,
        "vocab_size": space.vocab.size,
        "max_len": space.max_len,
        "mode": space.mode,
        "seed": seed,
        "max_residual": float(residual),
        "tol": TOLERANCES[check],
        "pass": bool(passed),
    }


def check_boltzmann(space: EnumSpace, seed: int, draws: int = 20) -> dict:
    """Normalization of the Boltzmann distribution plus the zero-reward
    limit (restriction-renormalization of the reference)."""
    rng = _rng(seed, 1)
    ref = _reference(space, rng)
    tol = TOLERANCES["boltzmann"]
    logmass = ref_logmass(space, ref)
    worst = 0.0
    for i in range(draws):
        beta = (0.5, 1.0, 1.5)[i % 3]
        p = boltzmann_distribution(
            space, random_reward(space, rng), ref, beta, logmass=logmass
        )
        worst = max(worst, abs(float(np.sum(p)) - 1.0))
    zero = {y: 0.0 for y in space.sequences}
    p0 = boltzmann_distribution(space, zero, ref, 1.0, logmass=logmass)
    renorm = np.exp(logmass - logsumexp_values(logmass))
    worst = max(worst, float(np.max(np.abs(p0 - renorm))))
    return _certificate("boltzmann", space, seed, worst, worst <= tol)


def check_optimality(
    space: EnumSpace, seed: int, policies: int = 10_000, draws: int = 20
) -> dict:
    """The Boltzmann distribution beats every random policy on the
    KL-constrained objective, and prefix posterior energies sum to the
    response-level posterior energy."""
    rng = _rng(seed, 2)
    ref = _reference(space, rng)
    tol = TOLERANCES["optimality"]
    reward = random_reward(space, rng)
    beta = 1.0
    logmass = ref_logmass(space, ref)
    best = kl_objective(
        space,
        boltzmann_distribution(space, reward, ref, beta, logmass=logmass),
        reward,
        ref,
        beta,
        logmass=logmass,
    )
    min_gap = np.inf
    remaining = policies
    while remaining > 0:
        chunk = min(remaining, 1024)
        objectives = kl_objective_batch(
            space,
            random_policies(space, chunk, rng),
            reward,
            ref,
            beta,
            logmass=logmass,
        )
        min_gap = min(min_gap, float(np.min(best - objectives)))
        remaining -= chunk
    worst = max(0.0, -float(min_gap))
    token_cache = {y: token_logprobs(ref, (), y) for y in space.sequences}
    for _ in range(draws):
        rstar = random_prefix_reward(space, rng)
        worst = max(
            worst,
            energy_additivity_residual(space, rstar, ref, beta, token_cache=token_cache),
        )
    return _certificate("optimality", space, seed, worst, worst <= tol)


def check_decompose(space: EnumSpace, seed: int, draws: int = 100) -> dict:
    """Round trip of the terminal-mass (exact) and per-response uniform
    decompositions."""
    rng = _rng(seed, 3)
    tol = TOLERANCES["decompose"]
    worst = 0.0
    for _ in range(draws):
        reward = random_reward(space, rng)
        worst = max(
            worst,
            decomposition_residual(space, reward, additive_decompose(space, reward)),
        )
        for y, parts in uniform_decomposition(reward).items():
            total = 0.0
            for part in parts:
                total += part
            worst = max(worst, abs(total - reward[y]))
    return _certificate("decompose", space, seed, worst, worst <= tol)


def check_reparam(space: EnumSpace, seed: int, draws: int = 20) -> dict:
    """Representative identity r* - shift = beta * log(pi/pi_ref) at 1e-10,
    and invariance of the induced policy under per-context reward shifts
    at 1e-12."""
    rng = _rng(seed, 4)
    ref = _reference(space, rng)
    residual = 0.0
    invariance = 0.0
    for i in range(draws):
        beta = (0.5, 1.0, 1.5)[i % 3]
        rstar = random_prefix_reward(space, rng)
        residual = max(residual, reparameterize(space, rstar, ref, beta).max_residual)
        invariance = max(
            invariance, shift_invariance_residual(space, rstar, ref, beta, rng)
        )
    passed = residual <= TOLERANCES["reparam"] and invariance <= 1e-12
    return _certificate("reparam", space, seed, max(residual, invariance), passed)


def check_theorem1(space: EnumSpace, seed: int, draws: int = 20) -> dict:
    """Decompose-then-reparameterize reconstructs every response-level
    reward from the policy/reference log-ratio up to one constant."""
    rng = _rng(seed, 5)
    ref = _reference(space, rng)
    tol = TOLERANCES["theorem1"]
    logmass = ref_logmass(space, ref)
    worst = 0.0
    for i in range(draws):
        beta = (0.5, 1.0, 1.5)[i % 3]
        reward = random_reward(space, rng)
        worst = max(
            worst, reconstruction_spread(space, reward, ref, beta, logmass=logmass)
        )
    return _certificate("theorem1", space, seed, worst, worst <= tol)


CHECKS = {
    "boltzmann": check_boltzmann,
    "optimality": check_optimality,
    "decompose": check_decompose,
    "reparam": check_reparam,
    "theorem1": check_theorem1,
}


def run_checks(
    vocab_size: int, max_len: int, seed: int, which: str = "all", mode: str = "eos"
) -> list[dict]:
    """Run the named certification (or all of them) on one space."""
    space = EnumSpace.build(vocab_size, max_len, mode)
    if which == "all":
        names = list(CHECKS)
    elif which in CHECKS:
        names = [which]
    else:
        raise ValidationError(
            f"unknown check {which!r}; expected all or one of {sorted(CHECKS)}"
        )
    return [CHECKS[name](space, seed) for name in names]

"""Post-training analysis of the emergent communication.

The pipeline: collect greedy open-gate evaluation episodes and tally token
usage; measure each (token, recipient) pair's causal effect on episodic
team reward by replaying the same seeds with that edge suppressed; flag
pairs whose effect is inside epsilon as null and mask them; estimate the
lossless budget as the fraction of traffic that survives the mask; sweep
success across budgets.

Counterfactual pairs share environment RNG streams: with nothing
suppressed the two runs are bit-identical, so a measured zero means zero.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .agents import ModelConfig, VocabMask, recipients_of
from .envs import EnvConfig, EpisodeLog
from .numerics import ConfigurationError, ParamSet
from .training import EvalSummary, evaluate

log = logging.getLogger("sparsecomm.analysis")


# ---------------------------------------------------------------------------
# k-means over emitted message vectors (vocabulary for continuous runs)


def kmeans(points: np.ndarray, k: int, seed, *, restarts: int = 10,
           iters: int = 100) -> np.ndarray:
    """Lloyd's algorithm, best inertia over seeded restarts. Empty clusters
    are reseeded from random points so all k centroids stay live."""
    points = np.asarray(points, dtype=float)
    n = len(points)
    if n == 0:
        raise ConfigurationError("kmeans on empty point set")
    k = min(k, n)
    best, best_inertia = None, np.inf
    for r in range(restarts):
        rng = np.random.default_rng((seed, r) if np.ndim(seed) == 0 else tuple(seed) + (r,))
        centroids = points[rng.choice(n, size=k, replace=False)].copy()
        labels = np.zeros(n, dtype=int)
        for _ in range(iters):
            d = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
            new_labels = d.argmin(axis=1)
            for j in range(k):
                sel = new_labels == j
                if sel.any():
                    centroids[j] = points[sel].mean(axis=0)
                else:
                    centroids[j] = points[rng.integers(n)]
            if (new_labels == labels).all():
                labels = new_labels
                break
            labels = new_labels
        inertia = ((points - centroids[labels]) ** 2).sum()
        if inertia < best_inertia:
            best, best_inertia = centroids.copy(), inertia
    return best


class ClusterTable:
    """Centroids that turn continuous message vectors into token ids
    (nearest centroid, ties to the lowest id)."""

    def __init__(self, centroids: np.ndarray):
        self.centroids = np.asarray(centroids, dtype=float)
        if self.centroids.ndim != 2 or len(self.centroids) < 1:
            raise ConfigurationError("cluster table needs a (K, d) centroid matrix")

    def __len__(self):
        return len(self.centroids)

    def assign(self, vector) -> int:
        d = self.centroids - np.asarray(vector, dtype=float)
        return int(np.argmin(np.einsum("kd,kd->k", d, d)))

    def save(self, path) -> None:
        np.save(path, self.centroids)

    @classmethod
    def load(cls, path) -> "ClusterTable":
        return cls(np.load(path))


# ---------------------------------------------------------------------------
# token statistics


@dataclass
class TokenStats:
    token_id: int
    emissions: int = 0
    per_recipient: dict = field(default_factory=dict)
    observations: set = field(default_factory=set)
    effects: dict = field(default_factory=dict)   # recipient -> mean reward delta
    null: bool = False

    @property
    def n_observations(self) -> int:
        return len(self.observations)


def _emission_events(logs: list[EpisodeLog], gate_mode: str):
    """(sender, recipient, token_id, vector, sender_obs_bytes) per delivered
    edge, reconstructed from logged gates and activity."""
    for eplog in logs:
        n = eplog.n_agents
        for rec in eplog.records:
            for i in range(n):
                if not rec.active[i] or not rec.gates[i]:
                    continue
                obs_key = np.asarray(rec.obs[i], dtype=float).tobytes()
                for slot, j in enumerate(recipients_of(i, n)):
                    if not rec.active[j]:
                        continue
                    bit = rec.gates[i][0 if gate_mode == "broadcast" else slot]
                    if not bit:
                        continue
                    yield i, j, rec.tokens[i], rec.messages[i], obs_key


def collect_token_stats(params: ParamSet, env_cfg: EnvConfig, mcfg: ModelConfig, *,
                        episodes: int = 500, seed: int = 0, n_clusters: int = 64,
                        cluster_table: ClusterTable | None = None):
    """Greedy open-gate evaluation with per-token tallies.

    Continuous runs get their vocabulary from k-means over all emitted
    vectors (reusing a provided table if given); discrete runs use prototype
    ids directly. Returns (stats list, cluster table or None, eval summary).
    """
    summary = evaluate(params, env_cfg, mcfg, episodes=episodes, seed=seed,
                       open_gate=True, keep_logs=True)
    events = list(_emission_events(summary.logs, mcfg.gate_mode))
    if not events:
        log.warning("no messages emitted over %d evaluation episodes", episodes)
        return [], cluster_table, summary

    if mcfg.message_mode == "continuous":
        if cluster_table is None:
            vectors = np.asarray([e[3] for e in events], dtype=float)
            centroids = kmeans(vectors, n_clusters, seed)
            cluster_table = ClusterTable(centroids)
        events = [(i, j, cluster_table.assign(vec), vec, ob)
                  for i, j, _tok, vec, ob in events]

    stats: dict[int, TokenStats] = {}
    for _i, j, token, _vec, obs_key in events:
        ts = stats.setdefault(token, TokenStats(token_id=token))
        ts.emissions += 1
        ts.per_recipient[j] = ts.per_recipient.get(j, 0) + 1
        ts.observations.add(obs_key)
    return [stats[t] for t in sorted(stats)], cluster_table, summary


# ---------------------------------------------------------------------------
# causal effects and the null mask


def _pairs_in_sample(logs, mcfg: ModelConfig, cluster_table) -> set:
    """(token, recipient) pairs actually delivered in the logged episodes."""
    pairs = set()
    for _i, j, tok, vec, _o in _emission_events(logs, mcfg.gate_mode):
        if tok is None and cluster_table is not None:
            tok = cluster_table.assign(vec)
        if tok is not None:
            pairs.add((tok, j))
    return pairs


def causal_token_effect(params: ParamSet, env_cfg: EnvConfig, mcfg: ModelConfig,
                        token_id: int, recipient: int, *, episodes: int = 100,
                        seed: int = 0, cluster_table: ClusterTable | None = None,
                        baseline: EvalSummary | None = None) -> float | None:
    """Mean change in episodic team reward when (token -> recipient) edges
    are suppressed, over paired evaluation episodes sharing RNG streams.
    None (undefined) if the token never reached that recipient unsuppressed.
    """
    if baseline is None or not baseline.logs:
        baseline = evaluate(params, env_cfg, mcfg, episodes=episodes, seed=seed,
                            open_gate=True, cluster_table=cluster_table,
                            keep_logs=True)
    if (token_id, recipient) not in _pairs_in_sample(baseline.logs, mcfg, cluster_table):
        return None
    suppressed = evaluate(params, env_cfg, mcfg, episodes=episodes, seed=seed,
                          open_gate=True, cluster_table=cluster_table,
                          suppress={(token_id, recipient)})
    return float(np.mean(suppressed.team_rewards - baseline.team_rewards))


def measure_all_effects(params: ParamSet, env_cfg: EnvConfig, mcfg: ModelConfig,
                        stats: list[TokenStats], *, episodes: int = 100,
                        seed: int = 0, cluster_table: ClusterTable | None = None):
    """Effects for every measured (token, recipient) pair, sharing one
    baseline run. Pairs from the stats pass that never show up in this
    sample stay undefined (None). Fills TokenStats.effects and returns the
    pair dict."""
    baseline = evaluate(params, env_cfg, mcfg, episodes=episodes, seed=seed,
                        open_gate=True, cluster_table=cluster_table, keep_logs=True)
    sampled = _pairs_in_sample(baseline.logs, mcfg, cluster_table)
    effects = {}
    for ts in stats:
        for recipient, count in sorted(ts.per_recipient.items()):
            if count == 0:
                continue
            pair = (ts.token_id, recipient)
            if pair not in sampled:
                effects[pair] = None
                ts.effects[recipient] = None
                continue
            suppressed = evaluate(params, env_cfg, mcfg, episodes=episodes,
                                  seed=seed, open_gate=True,
                                  cluster_table=cluster_table, suppress={pair})
            delta = float(np.mean(suppressed.team_rewards - baseline.team_rewards))
            effects[pair] = delta
            ts.effects[recipient] = delta
    return effects


def build_null_mask(stats: list[TokenStats], effects: dict, epsilon: float, *,
                    checkpoint_hash: str = "", global_mode: bool = False,
                    path=None) -> VocabMask:
    """Pairs with |effect| < epsilon are null. Unmeasured (never-emitted)
    pairs are excluded. Global mode masks a token for everyone only when
    every measured recipient of that token is null."""
    mask = VocabMask(checkpoint_hash=checkpoint_hash)
    if epsilon < 0:
        raise ConfigurationError("epsilon must be non-negative")
    null_pairs = {pair for pair, delta in effects.items()
                  if delta is not None and abs(delta) < epsilon}
    if global_mode:
        for ts in stats:
            measured = [(ts.token_id, r) for r, c in ts.per_recipient.items() if c > 0]
            if measured and all(p in null_pairs for p in measured):
                mask.add(ts.token_id, -1)
                ts.null = True
    else:
        for token, recipient in sorted(null_pairs):
            mask.add(token, recipient)
        for ts in stats:
            measured = [(ts.token_id, r) for r, c in ts.per_recipient.items() if c > 0]
            ts.null = bool(measured) and all(p in null_pairs for p in measured)
    if path is not None:
        mask.save(path)
    return mask


# ---------------------------------------------------------------------------
# budget estimates


@dataclass
class BStarEstimate:
    b_star: float
    std: float
    sample_size: int


def estimate_bstar(params: ParamSet, env_cfg: EnvConfig, mcfg: ModelConfig,
                   mask: VocabMask, *, episodes: int = 100, seeds=(0,),
                   cluster_table: ClusterTable | None = None) -> BStarEstimate | None:
    """Surviving-traffic fraction under the mask: per-episode ratio of
    messages emitted masked vs. open-gate unmasked on paired seeds, averaged
    over episodes, with the across-seed spread. None if there is no
    unmasked traffic to compare against (undefined)."""
    ratios_all = []
    per_seed = []
    for s in seeds:
        base = evaluate(params, env_cfg, mcfg, episodes=episodes, seed=s,
                        open_gate=True, cluster_table=cluster_table)
        masked = evaluate(params, env_cfg, mcfg, episodes=episodes, seed=s,
                          open_gate=True, vocab_mask=mask,
                          cluster_table=cluster_table)
        ratios = [m / b for m, b in zip(masked.emitted, base.emitted) if b > 0]
        if ratios:
            per_seed.append(float(np.mean(ratios)))
            ratios_all.extend(ratios)
    if not ratios_all:
        if len(mask) == 0:
            return BStarEstimate(1.0, 0.0, 0)
        log.warning("b* undefined: no unmasked traffic in the sample")
        return None
    b = float(np.clip(np.mean(ratios_all), 0.0, 1.0))
    return BStarEstimate(b, float(np.std(per_seed)), len(ratios_all))


def bstar_from_stats(stats: list[TokenStats], mask: VocabMask) -> float:
    """Static estimate from tallied emissions: the fraction that the mask
    would let through. Exactly 1 for an empty mask, non-increasing as the
    mask grows."""
    total = sum(ts.emissions for ts in stats)
    if total == 0:
        return 1.0
    blocked = sum(count for ts in stats
                  for recipient, count in ts.per_recipient.items()
                  if mask.blocks(ts.token_id, recipient))
    return 1.0 - blocked / total


def table1_metrics(stats: list[TokenStats], mask: VocabMask) -> dict:
    """Vocabulary quality summary: fraction of tokens fully null, mean
    distinct observations per token, and the emission share of null pairs."""
    if not stats:
        return {"null_vocab_fraction": 0.0, "obs_per_token": 0.0,
                "null_emission_fraction": 0.0, "n_tokens": 0}
    null_tokens = 0
    blocked_emissions = 0
    total_emissions = 0
    for ts in stats:
        pairs = [(r, c) for r, c in ts.per_recipient.items() if c > 0]
        if pairs and all(mask.blocks(ts.token_id, r) for r, _ in pairs):
            null_tokens += 1
        for r, c in pairs:
            total_emissions += c
            if mask.blocks(ts.token_id, r):
                blocked_emissions += c
    return {
        "null_vocab_fraction": null_tokens / len(stats),
        "obs_per_token": float(np.mean([ts.n_observations for ts in stats])),
        "null_emission_fraction": (blocked_emissions / total_emissions
                                   if total_emissions else 0.0),
        "n_tokens": len(stats),
    }


# ---------------------------------------------------------------------------
# budget sweep


def budget_sweep(params: ParamSet, env_cfg: EnvConfig, mcfg: ModelConfig, *,
                 budgets, episodes: int, seeds, mask: VocabMask | None,
                 b_star: float, cluster_table: ClusterTable | None = None,
                 finetuned: dict | None = None) -> list[dict]:
    """Success per budget: unmasked open gate at b=1, masked zero-shot for
    b >= b*, the matching finetuned policy (learned gate) below b*. Budgets
    lacking a finetuned policy are skipped with a warning."""
    finetuned = finetuned or {}
    rows = []
    for b in sorted(budgets, reverse=True):
        if b >= 1.0:
            source, run_params, run_mask, open_gate = "unmasked", params, None, True
        elif b >= b_star:
            source, run_params, run_mask, open_gate = "zero_shot", params, mask, True
        elif b in finetuned:
            source, run_params, run_mask, open_gate = "finetuned", finetuned[b], None, False
        else:
            log.warning("budget %.3f below b*=%.3f with no finetuned policy; skipped",
                        b, b_star)
            continue
        per_seed = []
        for s in seeds:
            summary = evaluate(run_params, env_cfg, mcfg, episodes=episodes,
                               seed=s, open_gate=open_gate, vocab_mask=run_mask,
                               cluster_table=cluster_table)
            per_seed.append(summary.success_rate)
        mean = float(np.mean(per_seed))
        ci = 1.96 * float(np.std(per_seed)) / np.sqrt(len(per_seed))
        rows.append({"budget": b, "success": mean, "ci95": ci, "source": source})
    return rows

"""Episode rollout and the combined training objective.

The loss stacks three parts: a REINFORCE policy term with a learned value
baseline (actions, and the gating head when a phase trains it), a full-state
reconstruction term tying each agent's decoder output to the concatenation
of every agent's observation, and a per-agent budget penalty that activates
once an agent's realized messaging fraction exceeds the budget.

Gate training uses two pathways at once: the score-function estimator with
the same advantage as actions minus the agent's realized budget penalty,
and the analytic gradient of the penalty through the emission probabilities
(expected messaging fraction). Pretraining forces the gate open and gives
its head no gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .agents import (ModelConfig, VocabMask, init_params, initial_state,
                     step_team)
from .envs import EnvConfig, EpisodeLog, StepRecord, episode_success, make_env
from .numerics import ConfigurationError, NonFiniteError, ParamSet

METRICS_HEADER = ("epoch", "seed", "phase", "success", "mean_reward", "m_avg",
                  "loss_pi", "loss_l1", "loss_l2")


@dataclass
class TrainConfig:
    gamma: float = 1.0
    lambda1: float = 0.1
    lambda2: float = 10.0
    budget: float = 1.0
    b_star: float = 1.0
    schedule: str = "pretrain"      # pretrain | finetune | tri_objective
    epochs: int = 100
    finetune_epochs: int = 0        # 0 -> epochs // 10
    samples_per_epoch: int = 5000
    batch_steps: int = 500
    lr: float = 0.003
    rms_decay: float = 0.99
    rms_eps: float = 1e-8
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    strict_budget_interval: bool = False

    def __post_init__(self):
        if not 0.0 < self.budget <= 1.0:
            raise ConfigurationError("budget must be in (0, 1]")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigurationError("gamma must be in [0, 1]")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigurationError("loss weights must be non-negative")
        if not 0.0 <= self.b_star <= 1.0:
            raise ConfigurationError("b_star must be in [0, 1]")
        if self.schedule not in ("pretrain", "finetune", "tri_objective"):
            raise ConfigurationError(f"unknown schedule {self.schedule!r}")

    def resolved_finetune_epochs(self) -> int:
        return self.finetune_epochs if self.finetune_epochs > 0 else max(1, self.epochs // 10)


@dataclass(frozen=True)
class Phase:
    name: str
    epochs: int
    force_open: bool
    gate_trainable: bool
    lambda2: float
    budget: float


def schedule(cfg: TrainConfig, *, have_checkpoint: bool = False) -> list[Phase]:
    """Phase list for the configured regime. Pretraining runs the full
    communication-action objective with the gate fixed open and no budget;
    finetuning trains the gate against the budget from a checkpoint;
    tri-objective trains everything from scratch."""
    if cfg.schedule == "pretrain":
        return [Phase("pretrain", cfg.epochs, True, False, 0.0, 1.0)]
    if cfg.schedule == "finetune":
        if not have_checkpoint:
            raise ConfigurationError("finetune schedule requires a checkpoint")
        return [Phase("finetune", cfg.resolved_finetune_epochs(), False, True,
                      cfg.lambda2, cfg.budget)]
    return [Phase("tri_objective", cfg.epochs, False, True, cfg.lambda2, cfg.budget)]


# ---------------------------------------------------------------------------
# returns and penalties


def compute_returns(rewards, gamma: float) -> np.ndarray:
    """Discounted suffix sums: G_t = r_t + gamma * G_{t+1}."""
    rewards = np.asarray(rewards, dtype=float)
    out = np.zeros_like(rewards)
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def segmented_returns(rewards, active, gamma: float) -> np.ndarray:
    """Returns computed independently per contiguous active run, so a slot
    reused by a later car never credits the earlier one."""
    rewards = np.asarray(rewards, dtype=float)
    active = np.asarray(active, dtype=bool)
    out = np.zeros_like(rewards)
    t = 0
    while t < len(rewards):
        if not active[t]:
            t += 1
            continue
        end = t
        while end < len(rewards) and active[end]:
            end += 1
        out[t:end] = compute_returns(rewards[t:end], gamma)
        t = end
    return out


def budget_penalty(m_avg_i: float, b: float, b_star: float, lam2: float,
                   strict: bool = False) -> float:
    """Per-agent messaging penalty lam2 * (m - (b + (1 - b_star)))^2, applied
    for m > b (default) or only inside (b, b_star) in strict mode. The target
    is clamped to [0, 1]."""
    target = min(1.0, max(0.0, b + (1.0 - b_star)))
    if strict:
        if not (b < m_avg_i < b_star):
            return 0.0
    elif m_avg_i <= b:
        return 0.0
    return lam2 * (m_avg_i - target) ** 2


def autoencoder_loss(decoded, targets, lambda1: float) -> nm.Tensor:
    """lambda1 * mean over (agent, step) pairs of the squared reconstruction
    error against the concatenated team observation."""
    decoded = list(decoded)
    targets = list(targets)
    if len(decoded) != len(targets) or not decoded:
        raise ConfigurationError("autoencoder_loss: empty or mismatched pairs")
    terms = [nm.l2_loss(d, t if isinstance(t, nm.Tensor) else nm.constant(t))
             for d, t in zip(decoded, targets)]
    return nm.scale(nm.add_n(terms), lambda1 / len(terms))


# ---------------------------------------------------------------------------
# rollout


@dataclass
class EpisodeRollout:
    log: EpisodeLog
    steps: list                      # TeamStepResult per t (tapes)
    rewards: np.ndarray              # (T, N)
    active: np.ndarray               # (T, N)
    full_states: list                # (N*obs_dim,) per t
    emitted: np.ndarray              # per agent
    opportunities: np.ndarray
    m_avg: np.ndarray
    success: bool = False

    def team_reward(self) -> float:
        return float(self.rewards.sum())


def rollout_episode(params: ParamSet, env, mcfg: ModelConfig, *, env_seed,
                    policy_seed=None, greedy: bool = False,
                    force_open: bool = False, vocab_mask: VocabMask | None = None,
                    cluster_table=None, suppress=None) -> EpisodeRollout:
    n = mcfg.n_agents
    rng = np.random.default_rng(policy_seed) if not greedy else None
    obs = env.reset(env_seed)
    states = [initial_state(mcfg) for _ in range(n)]
    log = EpisodeLog(env_kind=env.cfg.kind, env_seed=list(np.atleast_1d(env_seed)),
                     n_agents=n)
    steps, rewards, actives, full_states = [], [], [], []
    emitted = np.zeros(n, dtype=int)
    opportunities = np.zeros(n, dtype=int)
    broadcast = mcfg.gate_mode == "broadcast"
    emitted_steps = np.zeros(n, dtype=int)
    opportunity_steps = np.zeros(n, dtype=int)

    done = False
    while not done:
        active = env.active()
        out = step_team(params, mcfg, states, obs, active, rng=rng, greedy=greedy,
                        force_open=force_open, vocab_mask=vocab_mask,
                        cluster_table=cluster_table, suppress=suppress)
        result = env.step(out.actions)
        senders = {s for s, _, _ in out.delivered}
        for i in range(n):
            emitted[i] += out.emitted[i]
            opportunities[i] += out.opportunities[i]
            if out.opportunities[i] > 0:
                opportunity_steps[i] += 1
                if i in senders:
                    emitted_steps[i] += 1
        log.records.append(StepRecord(
            t=env.t - 1,
            active=[int(a) for a in active],
            obs=[np.asarray(o).tolist() for o in obs],
            actions=[(-1 if a is None else int(a)) for a in out.actions],
            tokens=[(m.token_id if m is not None else None) for m in out.messages],
            messages=[(m.vector.data.tolist() if m is not None else None)
                      for m in out.messages],
            gates=[(g.bits.tolist() if g is not None else []) for g in out.gates],
            rewards=result.rewards.tolist(),
            rng_calls=env.rng.calls,
            spawned=[int(s) for s in result.info.get("spawned", ())],
        ))
        steps.append(out)
        rewards.append(result.rewards.copy())
        actives.append([bool(a) for a in active])
        full_states.append(np.concatenate([np.asarray(o, dtype=float) for o in obs]))
        states = out.new_states
        for slot in result.info.get("spawned", ()):
            states[slot] = initial_state(mcfg)
        obs = result.obs
        done = result.done

    log.info = env.episode_info()
    if broadcast:
        m_avg = np.divide(emitted_steps, opportunity_steps,
                          out=np.zeros(n), where=opportunity_steps > 0)
    else:
        m_avg = np.divide(emitted, opportunities,
                          out=np.zeros(n), where=opportunities > 0)
    ro = EpisodeRollout(log=log, steps=steps,
                        rewards=np.asarray(rewards), active=np.asarray(actives),
                        full_states=full_states, emitted=emitted,
                        opportunities=(opportunity_steps if broadcast else opportunities),
                        m_avg=m_avg)
    ro.success = episode_success(log)
    return ro


# ---------------------------------------------------------------------------
# losses over a batch of rollouts


def policy_loss(batch: list[EpisodeRollout], cfg: TrainConfig, phase: Phase,
                mcfg: ModelConfig):
    """REINFORCE with value baseline and entropy bonus, plus the gate head's
    score-function term when the phase trains the gate. Returns the scalar
    tensor (normalized by episode count) and its float value parts."""
    terms = []
    gate_terms = []
    for ro in batch:
        t_count, n = ro.rewards.shape
        returns = np.stack([
            segmented_returns(ro.rewards[:, i], ro.active[:, i], cfg.gamma)
            for i in range(n)], axis=1)
        pen = np.array([
            budget_penalty(ro.m_avg[i], phase.budget, cfg.b_star, phase.lambda2,
                           cfg.strict_budget_interval)
            for i in range(n)])
        for t in range(t_count):
            step = ro.steps[t]
            for i in range(n):
                if step.log_probs[i] is None:
                    continue
                adv = returns[t, i] - float(step.values[i].data)
                terms.append(nm.scale(step.log_probs[i], -adv))
                diff = nm.shift(step.values[i], -returns[t, i])
                terms.append(nm.scale(nm.mul(diff, diff), cfg.value_coef))
                terms.append(nm.scale(step.entropies[i], -cfg.entropy_coef))
                if phase.gate_trainable and step.gates[i] is not None \
                        and step.gates[i].logits is not None:
                    g = step.gates[i]
                    w = _gate_slot_weights(i, t, ro, mcfg)
                    if w.sum() > 0:
                        glp = nm.bernoulli_logprob(g.logits, g.bits.astype(float),
                                                   mask=w)
                        gate_terms.append(nm.scale(glp, -(adv - pen[i])))
    if not terms:
        raise ConfigurationError("policy_loss on an empty batch")
    loss = nm.scale(nm.add_n(terms + gate_terms), 1.0 / len(batch))
    if not np.isfinite(loss.data):
        raise NonFiniteError("policy loss is non-finite")
    return loss


def _gate_slot_weights(i: int, t: int, ro: EpisodeRollout, mcfg: ModelConfig):
    """1.0 for gate slots whose recipient was active at step t."""
    active = ro.active[t]
    if mcfg.gate_mode == "broadcast":
        has_live = any(active[j] for j in range(mcfg.n_agents) if j != i)
        return np.array([1.0 if has_live else 0.0])
    return np.array([1.0 if active[j] else 0.0
                     for j in range(mcfg.n_agents) if j != i])


def expected_budget_terms(batch: list[EpisodeRollout], cfg: TrainConfig,
                          phase: Phase, mcfg: ModelConfig):
    """Analytic budget penalty through gate probabilities: one term per
    (episode, agent) whose expected messaging fraction violates the budget."""
    target = min(1.0, max(0.0, phase.budget + (1.0 - cfg.b_star)))
    out = []
    for ro in batch:
        for i in range(mcfg.n_agents):
            prob_terms = []
            weight_total = 0.0
            for t, step in enumerate(ro.steps):
                g = step.gates[i]
                if g is None or g.probs is None:
                    continue
                w = _gate_slot_weights(i, t, ro, mcfg)
                if w.sum() == 0:
                    continue
                prob_terms.append(nm.weighted_sum(g.probs, w))
                weight_total += w.sum()
            if not prob_terms or weight_total == 0:
                continue
            m_hat = nm.scale(nm.add_n(prob_terms), 1.0 / weight_total)
            m_val = float(m_hat.data)
            if cfg.strict_budget_interval:
                violated = phase.budget < m_val < cfg.b_star
            else:
                violated = m_val > phase.budget
            if violated:
                d = nm.shift(m_hat, -target)
                out.append(nm.scale(nm.mul(d, d), phase.lambda2))
    return out


def batch_loss(batch: list[EpisodeRollout], cfg: TrainConfig, phase: Phase,
               mcfg: ModelConfig):
    """Combined objective: policy + reconstruction + budget."""
    pi = policy_loss(batch, cfg, phase, mcfg)
    parts = {"loss_pi": float(pi.data), "loss_l1": 0.0, "loss_l2": 0.0}
    total = [pi]
    if cfg.lambda1 > 0:
        decoded, targets = [], []
        for ro in batch:
            for t, step in enumerate(ro.steps):
                for i in range(mcfg.n_agents):
                    if step.decoded[i] is not None:
                        decoded.append(step.decoded[i])
                        targets.append(ro.full_states[t])
        if decoded:
            ae = autoencoder_loss(decoded, targets, cfg.lambda1)
            parts["loss_l1"] = float(ae.data)
            total.append(ae)
    if phase.gate_trainable and phase.lambda2 > 0:
        terms = expected_budget_terms(batch, cfg, phase, mcfg)
        if terms:
            l2 = nm.scale(nm.add_n(terms), 1.0 / len(batch))
            parts["loss_l2"] = float(l2.data)
            total.append(l2)
    loss = nm.add_n(total) if len(total) > 1 else total[0]
    if not np.isfinite(loss.data):
        raise NonFiniteError("combined loss is non-finite")
    return loss, parts


def replay_loss(params: ParamSet, mcfg: ModelConfig, cfg: TrainConfig,
                phase: Phase, ro: EpisodeRollout,
                frozen_adv: np.ndarray | None = None) -> nm.Tensor:
    """Rebuild the combined loss of a recorded episode under the given
    parameters, holding actions, gate bits, and (optionally) advantages
    fixed. With frozen advantages the loss is a smooth deterministic
    function of the parameters, which is what the finite-difference
    gradient audit needs.
    """
    n = mcfg.n_agents
    returns = np.stack([
        segmented_returns(ro.rewards[:, i], ro.active[:, i], cfg.gamma)
        for i in range(n)], axis=1)
    if frozen_adv is None:
        values = np.array([[float(s.values[i].data) if s.values[i] is not None else 0.0
                            for i in range(n)] for s in ro.steps])
        frozen_adv = returns - values
    pen = np.array([
        budget_penalty(ro.m_avg[i], phase.budget, cfg.b_star, phase.lambda2,
                       cfg.strict_budget_interval)
        for i in range(n)])

    states = [initial_state(mcfg) for _ in range(n)]
    terms, decoded, targets = [], [], []
    prob_terms = [[] for _ in range(n)]
    prob_weight = np.zeros(n)
    for t, rec in enumerate(ro.log.records):
        out = step_team(
            params, mcfg, states,
            [np.asarray(o, dtype=float) for o in rec.obs], rec.active,
            force_open=phase.force_open,
            fixed_actions=rec.actions,
            fixed_gates=[np.asarray(b, dtype=int) if b else None for b in rec.gates])
        for i in range(n):
            if out.log_probs[i] is None:
                continue
            adv = frozen_adv[t, i]
            terms.append(nm.scale(out.log_probs[i], -adv))
            diff = nm.shift(out.values[i], -returns[t, i])
            terms.append(nm.scale(nm.mul(diff, diff), cfg.value_coef))
            terms.append(nm.scale(out.entropies[i], -cfg.entropy_coef))
            decoded.append(out.decoded[i])
            targets.append(ro.full_states[t])
            g = out.gates[i]
            if phase.gate_trainable and g is not None and g.logits is not None:
                w = np.asarray([ro.active[t][j] for j in range(n) if j != i],
                               dtype=float)
                if mcfg.gate_mode == "broadcast":
                    w = np.asarray([1.0 if w.sum() else 0.0])
                if w.sum() > 0:
                    glp = nm.bernoulli_logprob(g.logits, g.bits.astype(float), mask=w)
                    terms.append(nm.scale(glp, -(adv - pen[i])))
                    prob_terms[i].append(nm.weighted_sum(g.probs, w))
                    prob_weight[i] += w.sum()
        states = out.new_states
        for slot in rec.spawned:
            states[slot] = initial_state(mcfg)

    total = [nm.add_n(terms)]
    if cfg.lambda1 > 0 and decoded:
        total.append(autoencoder_loss(decoded, targets, cfg.lambda1))
    if phase.gate_trainable and phase.lambda2 > 0:
        target = min(1.0, max(0.0, phase.budget + (1.0 - cfg.b_star)))
        for i in range(n):
            if not prob_terms[i]:
                continue
            m_hat = nm.scale(nm.add_n(prob_terms[i]), 1.0 / prob_weight[i])
            if float(m_hat.data) > phase.budget:
                d = nm.shift(m_hat, -target)
                total.append(nm.scale(nm.mul(d, d), phase.lambda2))
    return nm.add_n(total) if len(total) > 1 else total[0]


# ---------------------------------------------------------------------------
# epochs


def run_epoch(params: ParamSet, env, mcfg: ModelConfig, cfg: TrainConfig,
              phase: Phase, seed: int, episode_counter: int, *,
              vocab_mask=None, cluster_table=None):
    """Collect samples_per_epoch environment steps in update batches of
    batch_steps, apply one RMSProp step per batch, and report epoch metrics.
    A non-finite loss aborts the epoch before any parameter update."""
    steps_done = 0
    episodes = []
    part_sums = {"loss_pi": 0.0, "loss_l1": 0.0, "loss_l2": 0.0}
    n_batches = 0
    while steps_done < cfg.samples_per_epoch:
        batch = []
        batch_steps = 0
        while batch_steps < cfg.batch_steps and steps_done < cfg.samples_per_epoch:
            ro = rollout_episode(
                params, env, mcfg,
                env_seed=(seed, episode_counter, 0),
                policy_seed=(seed, episode_counter, 1),
                force_open=phase.force_open, vocab_mask=vocab_mask,
                cluster_table=cluster_table)
            episode_counter += 1
            batch.append(ro)
            batch_steps += len(ro.steps)
            steps_done += len(ro.steps)
        loss, parts = batch_loss(batch, cfg, phase, mcfg)
        params.zero_grad()
        nm.backward(loss)
        nm.rmsprop_step(params, cfg.lr, cfg.rms_decay, cfg.rms_eps)
        for k in part_sums:
            part_sums[k] += parts[k]
        n_batches += 1
        episodes.extend(batch)

    n = mcfg.n_agents
    m_avg_agent = np.zeros(n)
    for i in range(n):
        vals = [ro.m_avg[i] for ro in episodes if ro.opportunities[i] > 0]
        m_avg_agent[i] = float(np.mean(vals)) if vals else 0.0
    metrics = {
        "success": float(np.mean([ro.success for ro in episodes])),
        "mean_reward": float(np.mean([ro.team_reward() for ro in episodes])),
        "m_avg": float(np.mean(m_avg_agent)),
        "m_avg_per_agent": m_avg_agent.tolist(),
        "loss_pi": part_sums["loss_pi"] / n_batches,
        "loss_l1": part_sums["loss_l1"] / n_batches,
        "loss_l2": part_sums["loss_l2"] / n_batches,
        "episodes": len(episodes),
    }
    return metrics, episode_counter


def arrival_curriculum(ramp_epochs: int, start: float = 0.05):
    """Traffic-junction spawn-rate ramp: linear from `start` to the
    configured arrival probability over `ramp_epochs`. Sparse-traffic
    episodes give clean pairwise-conflict credit early; density then rises
    to the target. No-op for other env kinds."""

    def apply(epoch: int, env) -> None:
        if env.cfg.kind != "traffic_junction":
            return
        if apply.target is None:
            apply.target = env.cfg.arrival_prob
        frac = 1.0 if ramp_epochs <= 0 else min(1.0, epoch / ramp_epochs)
        env.cfg.arrival_prob = start + (apply.target - start) * frac

    apply.target = None
    return apply


def run_training(env_cfg: EnvConfig, mcfg: ModelConfig, cfg: TrainConfig,
                 phases: list[Phase], seed: int, *, params: ParamSet | None = None,
                 on_epoch=None, vocab_mask=None, cluster_table=None,
                 curriculum=None):
    """Train one seed through the given phases. Stops early (parameters kept
    at their last finite state) if an epoch aborts on a non-finite loss.
    `curriculum(epoch, env)` runs before each epoch and may adjust the
    environment (e.g. the traffic arrival ramp)."""
    env = make_env(env_cfg)
    if params is None:
        params = init_params(mcfg, seed)
    episode_counter = 0
    history = []
    epoch_global = 0
    aborted = None
    for phase in phases:
        for _ in range(phase.epochs):
            if curriculum is not None:
                curriculum(epoch_global, env)
            try:
                metrics, episode_counter = run_epoch(
                    params, env, mcfg, cfg, phase, seed, episode_counter,
                    vocab_mask=vocab_mask, cluster_table=cluster_table)
            except NonFiniteError as exc:
                aborted = f"epoch {epoch_global}: {exc}"
                break
            metrics.update(epoch=epoch_global, seed=seed, phase=phase.name)
            history.append(metrics)
            if on_epoch is not None:
                on_epoch(metrics, params)
            epoch_global += 1
        if aborted:
            break
    return params, history, aborted


def format_metrics_row(metrics: dict) -> str:
    vals = []
    for key in METRICS_HEADER:
        v = metrics[key]
        vals.append(repr(v) if isinstance(v, float) else str(v))
    return ",".join(vals)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalSummary:
    successes: np.ndarray
    team_rewards: np.ndarray
    emitted: np.ndarray             # per episode, total delivered edges
    m_avg: float
    logs: list = field(default_factory=list)

    @property
    def success_rate(self) -> float:
        return float(self.successes.mean()) if len(self.successes) else 0.0

    @property
    def mean_reward(self) -> float:
        return float(self.team_rewards.mean()) if len(self.team_rewards) else 0.0


def evaluate(params: ParamSet, env_cfg: EnvConfig, mcfg: ModelConfig, *,
             episodes: int, seed: int, open_gate: bool = False,
             vocab_mask=None, cluster_table=None, suppress=None,
             keep_logs: bool = False) -> EvalSummary:
    """Greedy evaluation: argmax actions, gates thresholded at 0.5 (or forced
    open), deterministic given (config, seed)."""
    env = make_env(env_cfg)
    succ, rewards, emitted, logs = [], [], [], []
    agent_m = []
    with nm.no_grad():
        for k in range(episodes):
            ro = rollout_episode(params, env, mcfg, env_seed=(seed, k, 0),
                                 greedy=True, force_open=open_gate,
                                 vocab_mask=vocab_mask,
                                 cluster_table=cluster_table, suppress=suppress)
            succ.append(ro.success)
            rewards.append(ro.team_reward())
            emitted.append(int(ro.emitted.sum()))
            agent_m.append(ro.m_avg)
            if keep_logs:
                logs.append(ro.log)
    m_avg = float(np.mean([m.mean() for m in agent_m])) if agent_m else 0.0
    return EvalSummary(successes=np.asarray(succ, dtype=float),
                       team_rewards=np.asarray(rewards),
                       emitted=np.asarray(emitted, dtype=int),
                       m_avg=m_avg, logs=logs)

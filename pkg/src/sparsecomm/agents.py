"""Per-agent network: recurrent encoder, message head (continuous vector or
quantized prototype), per-recipient gating, mean aggregation, and a second
recurrent stage feeding policy / value / state-decoder heads.

All agents share one ParamSet; each carries its own recurrent state. Within
a timestep every agent encodes and emits before anyone aggregates, so
message exchange acts as a per-step barrier. A VocabMask suppresses
configured (token, recipient) edges at emission time; suppressed edges are
never delivered and never count as sent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .numerics import ConfigurationError, ParamSet, Tensor


@dataclass
class ModelConfig:
    obs_dim: int
    n_actions: int
    n_agents: int
    hidden: int = 32
    d_m: int = 8
    n_prototypes: int = 16
    message_mode: str = "continuous"      # continuous | discrete
    gate_mode: str = "targeting"          # targeting | broadcast
    decoder_input: str = "fused"          # fused | sum

    def __post_init__(self):
        if self.message_mode not in ("continuous", "discrete"):
            raise ConfigurationError(f"bad message_mode {self.message_mode!r}")
        if self.gate_mode not in ("targeting", "broadcast"):
            raise ConfigurationError(f"bad gate_mode {self.gate_mode!r}")
        if self.decoder_input not in ("fused", "sum"):
            raise ConfigurationError(f"bad decoder_input {self.decoder_input!r}")
        if self.decoder_input == "sum" and self.d_m != self.hidden:
            raise ConfigurationError("decoder_input=sum requires d_m == hidden")
        if self.message_mode == "discrete" and self.n_prototypes < 2:
            raise ConfigurationError("need at least 2 prototypes")

    @property
    def n_gate_slots(self) -> int:
        return 1 if self.gate_mode == "broadcast" else self.n_agents - 1


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg: ModelConfig, seed: int) -> ParamSet:
    """Fresh parameters: uniform +-1/sqrt(fan_in); prototype bank 0.1*N(0,1)
    resampled until rows are pairwise distinct."""
    rng = np.random.default_rng(seed)
    p = ParamSet()

    def dense(prefix, n_in, n_out, bias=True):
        p.add(f"{prefix}.W", _uniform(rng, n_in, (n_in, n_out)))
        if bias:
            p.add(f"{prefix}.b", _uniform(rng, n_in, (n_out,)))

    def gru(prefix, n_in, n_h):
        for gate in ("z", "r", "c"):
            p.add(f"{prefix}.W{gate}", _uniform(rng, n_in, (n_in, n_h)))
            p.add(f"{prefix}.U{gate}", _uniform(rng, n_h, (n_h, n_h)))
            p.add(f"{prefix}.b{gate}", _uniform(rng, n_h, (n_h,)))

    h, dm = cfg.hidden, cfg.d_m
    dense("embed", cfg.obs_dim, h)
    gru("gru1", h, h)
    dense("msg", h, dm, bias=False)   # pure linear projection to message space
    dense("gate", h, cfg.n_gate_slots)
    # gating starts mostly open (sigmoid(2) ~ 0.88): finetuning then picks up
    # from the forced-open pretraining behavior instead of a messaging cliff
    p["gate.b"].data[:] = 2.0
    gru("gru2", h + dm, h)
    dense("pi", h, cfg.n_actions)
    dense("v", h, 1)
    dense("dec1", h, h)               # decoder input is hidden-sized in both modes
    dense("dec2", h, cfg.n_agents * cfg.obs_dim)
    if cfg.message_mode == "discrete":
        while True:
            bank = 0.1 * rng.standard_normal((cfg.n_prototypes, dm))
            if len({row.tobytes() for row in bank}) == cfg.n_prototypes:
                break
        p.add("proto.bank", bank)
    return p


@dataclass
class Message:
    mode: str
    vector: Tensor
    token_id: int | None = None


@dataclass
class GateDecision:
    bits: np.ndarray                 # one per gate slot, {0,1}
    probs: Tensor | None = None      # sigmoid head output; None when bypassed
    logits: Tensor | None = None
    forced_open: bool = False


@dataclass
class AgentState:
    h: Tensor
    ht: Tensor
    last_message: Message | None = None
    last_gate: GateDecision | None = None


def initial_state(cfg: ModelConfig) -> AgentState:
    return AgentState(h=nm.zeros(cfg.hidden), ht=nm.zeros(cfg.hidden))


class VocabMask:
    """Set of (token_id, recipient) pairs to suppress at emission time.

    recipient -1 stands for "every recipient" (global entries). The file
    format is one entry per line, ``token_id,recipient`` with ``*`` for
    global, preceded by a header line binding the mask to the checkpoint
    it was derived from.
    """

    def __init__(self, entries=(), checkpoint_hash: str = ""):
        self.entries = set()
        self.checkpoint_hash = checkpoint_hash
        for token, recipient in entries:
            self.add(token, recipient)

    def add(self, token_id: int, recipient: int | str) -> None:
        recipient = -1 if recipient in (-1, "*") else int(recipient)
        self.entries.add((int(token_id), recipient))

    def blocks(self, token_id: int | None, recipient: int) -> bool:
        if token_id is None:
            return False
        return (token_id, recipient) in self.entries or (token_id, -1) in self.entries

    def __len__(self):
        return len(self.entries)

    def issubset(self, other: "VocabMask") -> bool:
        return self.entries <= other.entries

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"checkpoint {self.checkpoint_hash}\n")
            for token, recipient in sorted(self.entries):
                fh.write(f"{token},{'*' if recipient == -1 else recipient}\n")

    @classmethod
    def load(cls, path) -> "VocabMask":
        mask = cls()
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().split()
            if not header or header[0] != "checkpoint":
                raise ConfigurationError(f"{path}: missing checkpoint header")
            mask.checkpoint_hash = header[1] if len(header) > 1 else ""
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                token, recipient = line.split(",")
                mask.add(int(token), recipient.strip())
        return mask


# ---------------------------------------------------------------------------
# per-agent forward pieces


def encode(obs: np.ndarray, state: AgentState, params: ParamSet, cfg: ModelConfig) -> Tensor:
    if len(obs) != cfg.obs_dim:
        raise ConfigurationError(f"obs dim {len(obs)} != configured {cfg.obs_dim}")
    x = nm.dense_forward(nm.constant(obs), params["embed.W"], params["embed.b"], "tanh")
    return nm.gru_cell_forward(x, state.h, params, "gru1")


def make_message(h: Tensor, params: ParamSet, cfg: ModelConfig) -> Message:
    proj = nm.matvec(h, params["msg.W"])
    if cfg.message_mode == "discrete":
        token, vec = nm.prototype_quantize(proj, params["proto.bank"])
        return Message("discrete", vec, token)
    return Message("continuous", proj, None)


def gate(h: Tensor, params: ParamSet, cfg: ModelConfig, *,
         rng=None, greedy: bool = False, force_open: bool = False,
         fixed_bits=None) -> GateDecision:
    """Emission decision per gate slot: sampled from the sigmoid head during
    training, thresholded at 0.5 when greedy, bypassed entirely (all edges
    active, no head evaluation, no gradient) when forced open. fixed_bits
    replays recorded decisions while still taping the head."""
    n = cfg.n_gate_slots
    if force_open:
        return GateDecision(bits=np.ones(n, dtype=int), forced_open=True)
    logits = nm.add(nm.matvec(h, params["gate.W"]), params["gate.b"])
    probs = nm.sigmoid(logits)
    if fixed_bits is not None:
        bits = np.asarray(fixed_bits, dtype=int)
    elif greedy:
        bits = (probs.data >= 0.5).astype(int)
    else:
        if rng is None:
            raise ConfigurationError("sampled gating needs an rng")
        bits = (rng.uniform(size=n) < probs.data).astype(int)
    return GateDecision(bits=bits, probs=probs, logits=logits)


def apply_vocab_mask(msg: Message, recipient: int, mask: VocabMask | None,
                     cluster_table=None) -> Message | None:
    """None when the (token, recipient) edge is suppressed; the message is
    otherwise returned unchanged (never rewritten)."""
    if mask is None or len(mask) == 0:
        return msg
    token = msg.token_id
    if token is None:
        if cluster_table is None:
            raise ConfigurationError(
                "masking continuous messages requires a cluster table")
        token = cluster_table.assign(msg.vector.data)
    return None if mask.blocks(token, recipient) else msg


def aggregate(incoming: list[Tensor], d_m: int) -> Tensor:
    if not incoming:
        return nm.zeros(d_m)
    return nm.mean_n(incoming)


def act_and_decode(state: AgentState, h: Tensor, aggregated: Tensor,
                   params: ParamSet, cfg: ModelConfig):
    """Second recurrent stage over {h, aggregated messages}, then policy
    logits, scalar value, and the full-state reconstruction."""
    fused_in = nm.concat([h, aggregated])
    ht = nm.gru_cell_forward(fused_in, state.ht, params, "gru2")
    logits = nm.add(nm.matvec(ht, params["pi.W"]), params["pi.b"])
    value = nm.pick(nm.add(nm.matvec(ht, params["v.W"]), params["v.b"]), 0)
    dec_in = ht if cfg.decoder_input == "fused" else nm.add(h, aggregated)
    decoded = nm.dense_forward(
        nm.dense_forward(dec_in, params["dec1.W"], params["dec1.b"], "tanh"),
        params["dec2.W"], params["dec2.b"], "identity")
    return logits, value, decoded, ht


@dataclass
class TeamStepResult:
    actions: list
    new_states: list
    logits: list            # per agent, None if inactive
    log_probs: list
    entropies: list
    values: list
    decoded: list
    messages: list
    gates: list
    emitted: np.ndarray     # delivered edge count per sender
    opportunities: np.ndarray
    delivered: list = field(default_factory=list)  # (sender, recipient, token)


def recipients_of(i: int, n_agents: int) -> list[int]:
    return [j for j in range(n_agents) if j != i]


def step_team(params: ParamSet, cfg: ModelConfig, states: list[AgentState],
              obs_list, active, *, rng=None, greedy=False, force_open=False,
              vocab_mask: VocabMask | None = None, cluster_table=None,
              suppress=None, fixed_actions=None, fixed_gates=None) -> TeamStepResult:
    """One synchronized timestep for all agents.

    `suppress` is an extra set of (token, recipient) pairs dropped at
    emission, used by the counterfactual analysis; it behaves exactly like
    mask entries. Inactive agents neither emit nor receive. fixed_actions /
    fixed_gates replay a recorded episode under the current parameters.
    """
    n = cfg.n_agents
    hs: list[Tensor | None] = [None] * n
    msgs: list[Message | None] = [None] * n
    gts: list[GateDecision | None] = [None] * n

    for i in range(n):
        if not active[i]:
            continue
        hs[i] = encode(obs_list[i], states[i], params, cfg)
        msgs[i] = make_message(hs[i], params, cfg)
        gts[i] = gate(hs[i], params, cfg, rng=rng, greedy=greedy,
                      force_open=force_open,
                      fixed_bits=None if fixed_gates is None else fixed_gates[i])

    # exchange barrier: all sends resolved before any aggregation
    inbox: list[list[Tensor]] = [[] for _ in range(n)]
    emitted = np.zeros(n, dtype=int)
    opportunities = np.zeros(n, dtype=int)
    delivered = []
    masking = (vocab_mask is not None and len(vocab_mask) > 0) or bool(suppress)
    for i in range(n):
        if not active[i]:
            continue
        token = msgs[i].token_id
        if token is None and cluster_table is not None:
            token = cluster_table.assign(msgs[i].vector.data)
        if masking and token is None:
            raise ConfigurationError(
                "masking continuous messages requires a cluster table")
        recips = recipients_of(i, n)
        live = [j for j in recips if active[j]]
        opportunities[i] = len(live)
        for slot, j in enumerate(recips):
            if not active[j]:
                continue
            bit = gts[i].bits[0 if cfg.gate_mode == "broadcast" else slot]
            if not bit:
                continue
            if vocab_mask is not None and vocab_mask.blocks(token, j):
                continue
            if suppress and (token, j) in suppress:
                continue
            inbox[j].append(msgs[i].vector)
            emitted[i] += 1
            delivered.append((i, j, token))

    result = TeamStepResult(
        actions=[None] * n, new_states=list(states),
        logits=[None] * n, log_probs=[None] * n, entropies=[None] * n,
        values=[None] * n, decoded=[None] * n, messages=msgs, gates=gts,
        emitted=emitted, opportunities=opportunities, delivered=delivered)

    for i in range(n):
        if not active[i]:
            continue
        agg = aggregate(inbox[i], cfg.d_m)
        logits, value, decoded, ht = act_and_decode(states[i], hs[i], agg, params, cfg)
        if fixed_actions is not None:
            action = int(fixed_actions[i])
        elif greedy:
            action = int(np.argmax(logits.data))
        else:
            probs = nm.softmax(logits)
            action = int(rng.choice(cfg.n_actions, p=probs.data / probs.data.sum()))
        result.actions[i] = action
        result.logits[i] = logits
        result.log_probs[i] = nm.log_softmax_pick(logits, action)
        result.entropies[i] = nm.softmax_entropy(logits)
        result.values[i] = value
        result.decoded[i] = decoded
        result.new_states[i] = AgentState(h=hs[i], ht=ht,
                                          last_message=msgs[i], last_gate=gts[i])
    return result

"""
Refinement-generative Transformer over pairwise-distance tokens.

Each time token is the row-wise embedding of one ``J_in x J_in`` distance
matrix (sensors plus anchors), flattened to width ``d = J_in * c``. A window
of ``w`` feedback tokens is followed by the token of the current noisy
measurement; causal self-attention runs over this sequence, and every block
additionally mixes in the current measurement through gated cross-attention.
The last token is lifted to ``J_out * c`` and decoded by a pose head and an
upper-triangular pairwise-distance head.

Stage-II fine-tuning appends a spatio-temporal joint self-attention layer
(STJ-SA) to every block; see :meth:`WiPModel.add_stj_sa`.
"""

import math
from dataclasses import asdict, dataclass, fields

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidInputError, NumericError

VARIANTS = ("WiP-H", "WiP-SI", "WiP-Geo")
CROSS_ATTENTION_MODES = ("measurement_qk", "decoder_query")
FEEDBACK_MODES = ("pose_pwd", "pwd_head")

CHECKPOINT_FORMAT = "wip-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    num_blocks: int = 4
    channels: int = 32
    heads: int = 4
    stj_heads: int = 4
    dropout: float = 0.1
    window: int = 16
    variant: str = "WiP-H"
    num_joints: int = 24
    num_sparse: int = 6
    num_anchors: int = 3
    ffn_mult: int = 4
    cross_attention: str = "measurement_qk"
    gated: bool = True
    stj_sa: bool = False
    feedback: str = "pose_pwd"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InvalidInputError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.cross_attention not in CROSS_ATTENTION_MODES:
            raise InvalidInputError(f"unknown cross_attention mode {self.cross_attention!r}")
        if self.feedback not in FEEDBACK_MODES:
            raise InvalidInputError(f"unknown feedback mode {self.feedback!r}")
        if self.channels % self.heads or self.channels % self.stj_heads:
            raise InvalidInputError("channels must be divisible by the head counts")
        if self.d_model % self.heads:
            raise InvalidInputError("d_model must be divisible by heads")

    @property
    def j_in(self):
        return self.num_sparse + self.num_anchors

    @property
    def j_out(self):
        if self.variant == "WiP-SI":
            return self.j_in
        return self.num_joints + self.num_anchors

    @property
    def d_model(self):
        return self.j_in * self.channels

    @property
    def geometric_feedback(self):
        return self.variant == "WiP-Geo"

    @classmethod
    def from_dict(cls, data):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})


class PWDEmbedding(nn.Module):
    """Row-wise embedding of a distance matrix.

    Equivalent to a 1-D convolution over the flattened matrix with kernel and
    stride ``N``: row ``j`` maps to ``c`` channels with shared weights, so
    node ``j`` only depends on row ``j``. Negative entries are clamped to 0.
    """

    def __init__(self, num_nodes, channels):
        super().__init__()
        self.num_nodes = num_nodes
        self.row = nn.Linear(num_nodes, channels)

    def forward(self, d):
        if d.shape[-2:] != (self.num_nodes, self.num_nodes):
            raise InvalidInputError(
                f"expected (..., {self.num_nodes}, {self.num_nodes}) distances, got {tuple(d.shape)}"
            )
        return self.row(d.clamp_min(0.0))


class GatedCrossAttention(nn.Module):
    """Cross-attention between the current measurement and the hidden sequence.

    In ``measurement_qk`` mode queries and keys are projections of the
    measurement's node embedding, giving a node-to-node affinity that mixes
    the value projections of every hidden token's nodes. ``decoder_query``
    is the conventional arrangement (queries from the hidden state). The
    result is gated elementwise by ``sigmoid(W_g h)`` and added to
    ``dropout(h)``.
    """

    def __init__(self, num_nodes, channels, heads, dropout=0.0, mode="measurement_qk", gated=True):
        super().__init__()
        self.num_nodes = num_nodes
        self.channels = channels
        self.heads = heads
        self.mode = mode
        self.gated = gated
        d = num_nodes * channels
        self.norm = nn.LayerNorm(d)
        self.q = nn.Linear(channels, channels)
        self.k = nn.Linear(channels, channels)
        self.v = nn.Linear(channels, channels)
        self.out = nn.Linear(channels, channels)
        self.gate = nn.Linear(d, d)
        self.drop = nn.Dropout(dropout)
        self.gate_override = None

    def _split(self, x):
        return x.unflatten(-1, (self.heads, self.channels // self.heads)).transpose(-2, -3)

    def attend(self, measurement, h):
        """Ungated cross-attention output ``A_ca`` with the shape of ``h``."""
        b, t, _ = h.shape
        nodes = self.norm(h).view(b, t, self.num_nodes, self.channels)
        scale = 1.0 / math.sqrt(self.channels // self.heads)
        if self.mode == "measurement_qk":
            q = self._split(self.q(measurement))  # (B, H, n, ch)
            k = self._split(self.k(measurement))
            weights = torch.softmax(q @ k.transpose(-1, -2) * scale, dim=-1)
            v = self._split(self.v(nodes))  # (B, T, H, n, ch)
            mixed = weights[:, None] @ v
        else:
            q = self._split(self.q(nodes))
            k = self._split(self.k(measurement))[:, None]
            v = self._split(self.v(measurement))[:, None]
            weights = torch.softmax(q @ k.transpose(-1, -2) * scale, dim=-1)
            mixed = weights @ v
        mixed = mixed.transpose(-2, -3).flatten(-2)
        return self.out(mixed).flatten(-2)

    def gate_values(self, h):
        if self.gate_override is not None:
            return torch.full_like(h, float(self.gate_override))
        return torch.sigmoid(self.gate(self.norm(h)))

    def forward(self, measurement, h):
        a_ca = self.attend(measurement, h)
        if self.gated:
            a_ca = a_ca * self.gate_values(h)
        return a_ca + self.drop(h)


def flatten_joints(h, num_nodes):
    """``(B, T, J*c) -> (B, T*J, c)``"""
    b, t, width = h.shape
    return h.reshape(b, t * num_nodes, width // num_nodes)


def unflatten_joints(x, num_steps):
    """``(B, T*J, c) -> (B, T, J*c)``"""
    b, tokens, c = x.shape
    return x.reshape(b, num_steps, (tokens // num_steps) * c)


class STJSelfAttention(nn.Module):
    """Spatio-temporal joint self-attention.

    The hidden state is expanded from ``n_in`` to ``n_out`` joints with a
    learned node-mixing matrix, flattened to ``T * n_out`` tokens of width
    ``c``, passed through unmasked multi-head self-attention with a
    post-norm residual, unflattened, contracted back to ``n_in`` joints and
    added to the input through a zero-initialized projection (so a freshly
    inserted layer is the identity).
    """

    def __init__(self, n_in, n_out, channels, heads, dropout=0.0):
        super().__init__()
        self.n_in, self.n_out, self.channels, self.heads = n_in, n_out, channels, heads
        self.expand = nn.Parameter(torch.empty(n_out, n_in))
        self.contract = nn.Parameter(torch.empty(n_in, n_out))
        nn.init.xavier_uniform_(self.expand)
        nn.init.xavier_uniform_(self.contract)
        self.qkv = nn.Linear(channels, 3 * channels)
        self.proj = nn.Linear(channels, channels)
        self.norm = nn.LayerNorm(channels)
        self.drop = nn.Dropout(dropout)
        self.out = nn.Linear(channels, channels)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def self_attention(self, x, need_weights=False):
        """Unmasked multi-head attention over ``(B, L, c)`` tokens.

        Returns the projected output and, if requested, the per-head weights
        ``(B, heads, L, L)``.
        """
        q, k, v = self.qkv(x).unflatten(-1, (3, self.heads, -1)).permute(2, 0, 3, 1, 4)
        weights = None
        if need_weights:
            weights = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)
            y = weights @ v
        else:
            y = F.scaled_dot_product_attention(q, k, v)
        return self.proj(y.transpose(1, 2).flatten(-2)), weights

    def joint_attention(self, h, need_weights=False):
        """Flatten, self-attend, post-normalize and unflatten ``(B, T, n_out*c)``."""
        t = h.shape[1]
        x = flatten_joints(h, self.n_out)
        y, weights = self.self_attention(x, need_weights)
        return unflatten_joints(self.norm(x + self.drop(y)), t), weights

    def forward(self, h, need_weights=False):
        b, t, _ = h.shape
        nodes = h.view(b, t, self.n_in, self.channels)
        wide = torch.einsum("oi,btic->btoc", self.expand, nodes).flatten(-2)
        y, weights = self.joint_attention(wide, need_weights)
        back = torch.einsum("io,btoc->btic", self.contract, y.view(b, t, self.n_out, self.channels))
        return h + self.out(back).flatten(-2), weights


class WiPBlock(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        d = cfg.d_model
        self.cfg = cfg
        self.norm1 = nn.LayerNorm(d)
        self.self_attn = nn.MultiheadAttention(d, cfg.heads, dropout=cfg.dropout, batch_first=True)
        self.gca = GatedCrossAttention(
            cfg.j_in, cfg.channels, cfg.heads, cfg.dropout, cfg.cross_attention, cfg.gated
        )
        self.norm2 = nn.LayerNorm(d)
        self.ffn = nn.Sequential(
            nn.Linear(d, cfg.ffn_mult * d),
            nn.GELU(),
            nn.Linear(cfg.ffn_mult * d, d),
        )
        self.drop = nn.Dropout(cfg.dropout)
        self.stj = None

    def add_stj_sa(self):
        cfg = self.cfg
        self.stj = STJSelfAttention(cfg.j_in, cfg.j_out, cfg.channels, cfg.stj_heads, cfg.dropout)

    def forward(self, h, measurement, causal_mask, need_weights=False):
        x = self.norm1(h)
        y, _ = self.self_attn(x, x, x, attn_mask=causal_mask, need_weights=False)
        h = h + self.drop(y)
        h = self.gca(measurement, h)
        h = h + self.drop(self.ffn(self.norm2(h)))
        weights = None
        if self.stj is not None:
            h, weights = self.stj(h, need_weights)
        return h, weights


class WiPModel(nn.Module):
    """Pose and pairwise-distance generator; see the module docstring."""

    def __init__(self, cfg=None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        d, c = cfg.d_model, cfg.channels
        self.noisy_embed = PWDEmbedding(cfg.j_in, c)
        if cfg.geometric_feedback:
            self.feedback_embed = nn.Linear(cfg.j_out * 3, d)
        else:
            self.feedback_embed = PWDEmbedding(cfg.j_in, c)
        self.pos_embed = nn.Parameter(torch.randn(cfg.window + 1, d) * 0.02)
        self.blocks = nn.ModuleList(WiPBlock(cfg) for _ in range(cfg.num_blocks))
        self.final_norm = nn.LayerNorm(d)
        self.lift = nn.Linear(d, cfg.j_out * c)
        self.pose_head = nn.Linear(cfg.j_out * c, cfg.j_out * 3)
        n = cfg.j_out
        self.register_buffer("_triu", torch.triu_indices(n, n, offset=1), persistent=False)
        self.pwd_head = nn.Linear(cfg.j_out * c, self._triu.shape[1])
        mask = torch.full((cfg.window + 1, cfg.window + 1), float("-inf")).triu(1)
        self.register_buffer("causal_mask", mask, persistent=False)
        if cfg.stj_sa:
            self._insert_stj()

    def _insert_stj(self):
        for block in self.blocks:
            block.add_stj_sa()

    def add_stj_sa(self):
        """Append a (near-identity) STJ-SA layer to every block."""
        if self.cfg.stj_sa:
            raise InvalidInputError("STJ-SA layers are already present")
        self.cfg.stj_sa = True
        self._insert_stj()

    def embed_feedback(self, past):
        if self.cfg.geometric_feedback:
            return self.feedback_embed(past.flatten(-2))
        return self.feedback_embed(past).flatten(-2)

    def forward(self, past, current, return_attention=False, check_finite=True):
        """Predict the pose and distance matrix at the current frame.

        Parameters
        ----------
        past : (B, w, J_in, J_in) feedback distances, or (B, w, J_out, 3)
            poses for the geometric-feedback variant
        current : (B, J_in, J_in) noisy measurement

        Returns
        -------
        pose : (B, J_out, 3)
        distances : (B, J_out, J_out), symmetric with zero diagonal
        attention : list of per-block STJ-SA maps ``(B, heads, T*J_out, T*J_out)``
            (only when ``return_attention``)
        """
        cfg = self.cfg
        unbatched = current.dim() == 2
        if unbatched:
            past, current = past[None], current[None]
        if past.shape[1] != cfg.window:
            raise InvalidInputError(f"expected a window of {cfg.window} past frames, got {past.shape[1]}")
        measurement = self.noisy_embed(current)
        tokens = torch.cat([self.embed_feedback(past), measurement.flatten(-2)[:, None]], dim=1)
        h = tokens + self.pos_embed
        maps = []
        for i, block in enumerate(self.blocks):
            h, weights = block(h, measurement, self.causal_mask, need_weights=return_attention)
            if check_finite and not torch.isfinite(h).all():
                raise NumericError(f"non-finite hidden state after block {i}")
            if weights is not None:
                maps.append(weights)
        z = F.gelu(self.lift(self.final_norm(h[:, -1])))
        pose = self.pose_head(z).view(-1, cfg.j_out, 3)
        upper = self.pwd_head(z)
        dist = upper.new_zeros(upper.shape[0], cfg.j_out, cfg.j_out)
        dist[:, self._triu[0], self._triu[1]] = upper
        dist = dist + dist.transpose(1, 2)
        if unbatched:
            pose, dist = pose[0], dist[0]
        if return_attention:
            return pose, dist, maps
        return pose, dist

    def parameter_count(self, trainable_only=False):
        return sum(p.numel() for p in self.parameters() if p.requires_grad or not trainable_only)


def is_stage2_trainable(name):
    """Stage-II trains gated cross-attention and STJ-SA parameters only."""
    return ".gca." in name or ".stj." in name


def save_checkpoint(model, path, stage, meta=None):
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": asdict(model.cfg),
            "stage": stage,
            "state_dict": model.state_dict(),
            "meta": meta or {},
        },
        path,
    )


def load_checkpoint(path, expected_config=None):
    """Rebuild a model from a checkpoint; returns ``(model, payload)``."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT or payload.get("version") != CHECKPOINT_VERSION:
        raise InvalidInputError(f"{path} is not a version-{CHECKPOINT_VERSION} checkpoint")
    if payload.get("stage") not in ("stage1", "stage2"):
        raise InvalidInputError(f"unknown training stage tag {payload.get('stage')!r}")
    cfg = ModelConfig.from_dict(payload["config"])
    if expected_config is not None:
        for key, value in asdict(expected_config).items():
            if key != "stj_sa" and getattr(cfg, key) != value:
                raise InvalidInputError(f"checkpoint {key}={getattr(cfg, key)!r} does not match config {value!r}")
    model = WiPModel(cfg)
    state = payload["state_dict"]
    own = model.state_dict()
    for name, tensor in own.items():
        if name not in state:
            raise InvalidInputError(f"checkpoint is missing parameter {name}")
        if state[name].shape != tensor.shape:
            raise InvalidInputError(f"shape mismatch for {name}: {tuple(state[name].shape)} vs {tuple(tensor.shape)}")
    extra = set(state) - set(own)
    if extra:
        raise InvalidInputError(f"checkpoint has unexpected parameters {sorted(extra)[:3]}")
    model.load_state_dict(state)
    model.eval()
    return model, payload

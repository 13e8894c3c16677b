"""Convolutional block grid shared by all base learners.

Blocks are indexed (i, j): i is the resolution level (spatial size H / 2^i),
j the position along the decoding pathway.  Encoders sit at (i, 0); the
depth-d learner uses encoders (0,0)..(d,0) plus decoders (d-1,1)..(0,d) and
supervises every block with i + j = d through a 1x1 projection head.
Stages grow the grid one depth at a time; completed encoder columns are
frozen and later skip connections re-calibrate their features with
squeeze-and-excitation gates.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn


class ShapeError(ValueError):
    """Input tensor does not match the block or grid geometry."""


def blocks_for_depth(d: int) -> list[tuple[int, int]]:
    """Supervised blocks of the depth-d learner: (d,0), (d-1,1), ..., (0,d)."""
    return [(d - j, j) for j in range(d + 1)]


def block_key(i: int, j: int) -> str:
    return f"{i}_{j}"


class ConvBlock(nn.Module):
    """Two 3x3 conv + BN + ReLU layers; spatial size preserved."""

    def __init__(self, in_channels: int, out_channels: int, norm: bool = True):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.bn1 = nn.BatchNorm2d(out_channels) if norm else nn.Identity()
        self.bn2 = nn.BatchNorm2d(out_channels) if norm else nn.Identity()

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ShapeError(
                f"expected {self.in_channels} input channels, got {x.shape[1]}"
            )
        x = F.relu(self.bn1(self.conv1(x)))
        return F.relu(self.bn2(self.conv2(x)))


class SCSEGate(nn.Module):
    """Concurrent spatial and channel squeeze-and-excitation.

    The spatial branch squeezes channels with a 1x1 projection and re-weights
    each location by a sigmoid; the channel branch squeezes space by global
    average pooling, passes through a two-layer bottleneck (reduction C/2,
    floored, minimum 1) and re-weights each channel.  The two re-calibrated
    maps are combined elementwise (max by default).
    """

    def __init__(self, channels: int, combine: str = "max"):
        super().__init__()
        if combine not in ("max", "add"):
            raise ValueError(f"unknown combine mode {combine!r}")
        self.channels = channels
        self.combine = combine
        hidden = max(1, channels // 2)
        self.spatial = nn.Conv2d(channels, 1, 1, bias=False)
        self.fc_squeeze = nn.Linear(channels, hidden, bias=False)
        self.fc_excite = nn.Linear(hidden, channels, bias=False)

    def forward(self, u):
        if u.shape[1] != self.channels:
            raise ShapeError(f"gate expects {self.channels} channels, got {u.shape[1]}")
        q = torch.sigmoid(self.spatial(u))
        z = u.mean(dim=(2, 3))
        z_hat = torch.sigmoid(self.fc_excite(F.relu(self.fc_squeeze(z))))
        spatial_out = u * q
        channel_out = u * z_hat[:, :, None, None]
        if self.combine == "max":
            return torch.max(spatial_out, channel_out)
        return spatial_out + channel_out


def _init_module(module: nn.Module, generator: torch.Generator | None):
    """He-uniform conv weights, zero biases, identity-style norm layers."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.kaiming_uniform_(m.weight, nonlinearity="relu", generator=generator)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


class NestedUNetGrid(nn.Module):
    """Growable grid of encoder/decoder blocks with per-stage freezing.

    add_stage(d) creates the blocks the depth-d learner needs on top of the
    previous stages: the new encoder (d, 0), decoders (d-j, j) for j >= 1,
    their upsamplers and supervision heads, and (for d >= 2, when enabled)
    scSE gates on the skip edges feeding the new decoders.
    """

    def __init__(
        self,
        in_channels: int,
        class_count: int,
        base_filters: int = 16,
        use_scse: bool = True,
        deep_supervision: bool = True,
        upsample: str = "transposed",
        scse_combine: str = "max",
        norm: bool = True,
    ):
        super().__init__()
        if class_count < 2:
            raise ValueError("class_count must be >= 2")
        if upsample not in ("transposed", "bilinear"):
            raise ValueError(f"unknown upsample mode {upsample!r}")
        self.in_channels = in_channels
        self.class_count = class_count
        self.base_filters = base_filters
        self.use_scse = use_scse
        self.deep_supervision = deep_supervision
        self.upsample = upsample
        self.scse_combine = scse_combine
        self.norm = norm
        self.blocks = nn.ModuleDict()
        self.ups = nn.ModuleDict()
        self.heads = nn.ModuleDict()
        self.gates = nn.ModuleDict()
        self.frozen: set[tuple[int, int]] = set()
        self.built_depth = 0

    def channels(self, level: int) -> int:
        return self.base_filters * (2 ** level)

    def has_block(self, i: int, j: int) -> bool:
        return block_key(i, j) in self.blocks

    def block(self, i: int, j: int) -> ConvBlock:
        return self.blocks[block_key(i, j)]

    def _new_block(self, i: int, j: int, generator) -> None:
        if j == 0:
            in_ch = self.in_channels if i == 0 else self.channels(i - 1)
        elif self.upsample == "transposed":
            in_ch = 2 * self.channels(i)
        else:
            # bilinear upsampling keeps the deeper block's channel count
            in_ch = self.channels(i) + self.channels(i + 1)
        block = ConvBlock(in_ch, self.channels(i), norm=self.norm)
        _init_module(block, generator)
        self.blocks[block_key(i, j)] = block
        if j >= 1 and self.upsample == "transposed":
            up = nn.ConvTranspose2d(self.channels(i + 1), self.channels(i), 2, stride=2)
            _init_module(up, generator)
            self.ups[block_key(i, j)] = up

    def _new_head(self, i: int, j: int, generator) -> None:
        head = nn.Conv2d(self.channels(i), self.class_count, 1)
        _init_module(head, generator)
        self.heads[block_key(i, j)] = head

    def add_stage(self, d: int, generator: torch.Generator | None = None) -> None:
        if d != self.built_depth + 1:
            raise ValueError(f"stages must be added in order; next is {self.built_depth + 1}")
        if d == 1 and not self.has_block(0, 0):
            self._new_block(0, 0, generator)
        for j in range(d + 1):
            i = d - j
            self._new_block(i, j, generator)
        supervised = blocks_for_depth(d) if self.deep_supervision else [(0, d)]
        for i, j in supervised:
            self._new_head(i, j, generator)
        if self.use_scse and d >= 2:
            for i in range(d):
                gate = SCSEGate(self.channels(i), combine=self.scse_combine)
                _init_module(gate, generator)
                self.gates[block_key(i, d - i)] = gate
        self.built_depth = d

    def build_learner(self, d: int, generator: torch.Generator | None = None) -> None:
        """Create only the blocks of a standalone depth-d learner.

        Used for single-model training (no staging): encoders 0..d plus the
        depth-d decoder row.  No scSE gates, since nothing is frozen.
        """
        if self.built_depth != 0:
            raise ValueError("build_learner requires an empty grid")
        self._new_block(0, 0, generator)
        for level in range(1, d + 1):
            self._new_block(level, 0, generator)
        for j in range(1, d + 1):
            self._new_block(d - j, j, generator)
        supervised = blocks_for_depth(d) if self.deep_supervision else [(0, d)]
        for i, j in supervised:
            self._new_head(i, j, generator)
        self.built_depth = d

    def _upsample(self, i: int, j: int, x):
        if self.upsample == "transposed":
            return self.ups[block_key(i, j)](x)
        return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)

    def forward_depth(
        self, x: torch.Tensor, d: int, return_features: bool = False
    ) -> dict[tuple[int, int], torch.Tensor]:
        """Logits of every supervised block of the depth-d learner.

        Returns {(i, j): logits} with logits of shape (N, C, H/2^i, W/2^i).
        Frozen encoder levels run without autograd tracking.
        """
        if d < 1 or d > self.built_depth:
            raise ShapeError(f"depth {d} outside built range 1..{self.built_depth}")
        h, w = x.shape[-2:]
        if h % (2 ** d) or w % (2 ** d):
            raise ShapeError(f"input {h}x{w} not divisible by 2^{d}")

        enc: list[torch.Tensor] = []
        feat = x
        for i in range(d + 1):
            inp = feat if i == 0 else F.max_pool2d(enc[i - 1], 2)
            block = self.block(i, 0)
            if (i, 0) in self.frozen:
                with torch.no_grad():
                    feat = block(inp)
            else:
                feat = block(inp)
            enc.append(feat)

        features = {(i, 0): enc[i] for i in range(d + 1)}
        out: dict[tuple[int, int], torch.Tensor] = {}
        if self.has_head(d, 0):
            out[(d, 0)] = self.heads[block_key(d, 0)](enc[d])

        feat = enc[d]
        for j in range(1, d + 1):
            i = d - j
            skip = enc[i]
            gate_key = block_key(i, j)
            if gate_key in self.gates:
                skip = self.gates[gate_key](skip)
            feat = self.block(i, j)(torch.cat([skip, self._upsample(i, j, feat)], dim=1))
            features[(i, j)] = feat
            if self.has_head(i, j):
                out[(i, j)] = self.heads[block_key(i, j)](feat)

        if return_features:
            return out, features
        return out

    def has_head(self, i: int, j: int) -> bool:
        return block_key(i, j) in self.heads

    def freeze_encoders(self, d: int) -> None:
        """Freeze encoder columns (j, 0) for j <= d: no grads, fixed BN stats."""
        for j in range(d + 1):
            if not self.has_block(j, 0):
                continue
            self.block(j, 0).requires_grad_(False)
            self.frozen.add((j, 0))

    def set_training_stage(self, d: int) -> None:
        """Train mode for the unfrozen blocks on the depth-d path, eval elsewhere.

        Frozen blocks normalize with their stored running statistics so that
        later stages cannot drift them.
        """
        self.eval()
        for i, j in self.learner_blocks(d):
            if (i, j) in self.frozen:
                continue
            self.block(i, j).train()
            key = block_key(i, j)
            if key in self.ups:
                self.ups[key].train()
            if key in self.gates:
                self.gates[key].train()
            if key in self.heads:
                self.heads[key].train()

    def learner_blocks(self, d: int) -> list[tuple[int, int]]:
        """All grid blocks the depth-d learner's forward pass touches."""
        return [(i, 0) for i in range(d + 1)] + [(d - j, j) for j in range(1, d + 1)]

    def stage_parameters(self, d: int):
        """Trainable parameters of the depth-d learner (requires_grad only)."""
        params = []
        seen = set()
        for i, j in self.learner_blocks(d):
            key = block_key(i, j)
            mods = [self.blocks[key]]
            for coll in (self.ups, self.gates, self.heads):
                if key in coll:
                    mods.append(coll[key])
            for m in mods:
                for p in m.parameters():
                    if p.requires_grad and id(p) not in seen:
                        seen.add(id(p))
                        params.append(p)
        return params

    def block_bytes(self, i: int, j: int, include_head: bool = True) -> bytes:
        """Raw little-endian bytes of a block's parameters and buffers.

        Keys are visited in sorted order, so equal byte strings mean the block
        (and optionally its supervision head) is numerically identical.
        """
        chunks = []
        state = self.block(i, j).state_dict()
        if include_head and self.has_head(i, j):
            head_state = self.heads[block_key(i, j)].state_dict()
            state = dict(state, **{f"head.{k}": v for k, v in head_state.items()})
        for key in sorted(state):
            chunks.append(state[key].detach().cpu().numpy().tobytes())
        return b"".join(chunks)

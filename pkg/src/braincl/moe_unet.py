"""Domain-conditioned mixture-of-experts 3D UNet.

Every convolution block in the encoder, bottleneck and decoder holds e
parallel expert convolutions whose outputs are combined with softmax gate
weights computed from the domain token by a per-block linear gate. The
aggregation is a convex combination (soft selection), so all experts stay
trainable for every domain while their influence varies with the token.
The final 1x1x1 logit head is a plain convolution, keeping the output
calibration token-agnostic.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .domain import DomainToken, ValidationError


def gate_weights(bits, weight, bias):
    """Softmax gate: g = softmax(W @ bits + b), one weight per expert.

    Accepts a single token bit vector [L] or a batch [B, L]; numpy inputs
    give numpy output. Weights are positive and sum to 1 per row.
    """
    numpy_in = not torch.is_tensor(bits)
    bits_t = torch.as_tensor(np.asarray(bits), dtype=torch.float64 if numpy_in else None)
    w = torch.as_tensor(np.asarray(weight)) if not torch.is_tensor(weight) else weight
    b = torch.as_tensor(np.asarray(bias)) if not torch.is_tensor(bias) else bias
    if numpy_in:
        w, b = w.double(), b.double()
    if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
        raise ValidationError(f"bad gate parameter shapes W{tuple(w.shape)} b{tuple(b.shape)}")
    if bits_t.shape[-1] != w.shape[1]:
        raise ValidationError(
            f"token length {bits_t.shape[-1]} does not match gate input {w.shape[1]}"
        )
    logits = F.linear(bits_t.to(w.dtype), w, b)
    g = torch.softmax(logits, dim=-1)
    return g.numpy() if numpy_in else g


class MoEConvBlock(nn.Module):
    """Conv block with e softmax-gated experts and shared norm/activation."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        token_len: int,
        experts: int,
        kernel_size: int = 3,
    ):
        super().__init__()
        if experts < 1:
            raise ValidationError("need at least one expert")
        self.padding = kernel_size // 2
        self.experts = nn.ModuleList(
            nn.Conv3d(in_channels, out_channels, kernel_size, padding=self.padding)
            for _ in range(experts)
        )
        # moderate init spread: distinct tokens route to visibly different
        # expert mixtures from the start (helps domains settle into different
        # experts) while staying soft enough that every expert keeps training
        self.gate = nn.Linear(token_len, experts)
        nn.init.uniform_(self.gate.weight, -0.5, 0.5)
        nn.init.zeros_(self.gate.bias)
        self.norm = nn.InstanceNorm3d(out_channels, affine=True)
        self.act = nn.LeakyReLU(0.01)

    def gate_weights(self, bits: torch.Tensor) -> torch.Tensor:
        return gate_weights(bits, self.gate.weight, self.gate.bias)

    def aggregate(self, f: torch.Tensor, bits: torch.Tensor) -> torch.Tensor:
        """Pre-norm convex combination: sum_i g_i * expert_i(f).

        By linearity the gate folds into the kernels, so the whole mixture
        runs as one batch-grouped convolution with a per-sample combined
        kernel (much faster on CPU than e separate convolutions).
        """
        cin = self.experts[0].in_channels
        cout = self.experts[0].out_channels
        if f.shape[1] != cin:
            raise ValidationError(
                f"feature channels {f.shape[1]} != expert input {cin}"
            )
        batch = f.shape[0]
        g = self.gate_weights(bits)  # [B, e]
        w = torch.stack([expert.weight for expert in self.experts])  # [e, Co, Ci, k, k, k]
        b = torch.stack([expert.bias for expert in self.experts])  # [e, Co]
        wk = torch.einsum("be,eoikjl->boikjl", g, w).reshape(batch * cout, cin, *w.shape[3:])
        bk = (g @ b).reshape(batch * cout)
        out = F.conv3d(
            f.reshape(1, batch * cin, *f.shape[2:]),
            wk,
            bk,
            padding=self.padding,
            groups=batch,
        )
        return out.view(batch, cout, *f.shape[2:])

    def forward(self, f: torch.Tensor, bits: torch.Tensor) -> torch.Tensor:
        return self.act(self.norm(self.aggregate(f, bits)))


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; in_channels must equal the universe's m."""

    in_channels: int
    token_len: int
    widths: tuple[int, ...] = (8, 16, 32)
    experts: int = 4
    out_channels: int = 2
    bottleneck_tag: str = field(default="")

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.in_channels < 1 or any(w < 1 for w in self.widths):
            raise ValidationError("channel counts must be positive")
        if not self.bottleneck_tag:
            object.__setattr__(
                self, "bottleneck_tag", f"enc{len(self.widths) - 1}.block1"
            )

    @property
    def depth(self) -> int:
        return len(self.widths)

    @property
    def spatial_multiple(self) -> int:
        return 2 ** (self.depth - 1)

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "token_len": self.token_len,
            "widths": list(self.widths),
            "experts": self.experts,
            "out_channels": self.out_channels,
            "bottleneck_tag": self.bottleneck_tag,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            in_channels=int(d["in_channels"]),
            token_len=int(d["token_len"]),
            widths=tuple(d["widths"]),
            experts=int(d["experts"]),
            out_channels=int(d.get("out_channels", 2)),
            bottleneck_tag=d.get("bottleneck_tag", ""),
        )


@dataclass
class ForwardOutput:
    """Voxelwise class logits plus the flattened deepest encoder feature map."""

    logits: np.ndarray  # [out_channels, D, H, W]
    bottleneck: np.ndarray  # [F], C-order flattening


class MoEUNet3D(nn.Module):
    """Encoder-decoder segmentation network of MoE conv blocks.

    Two MoE blocks per stage, max-pool downsampling, trilinear upsampling
    with skip concatenation. forward() is batched; the deepest encoder
    output (before pooling is undone) is returned flattened per sample for
    latent distillation.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        w = config.widths
        tl, e = config.token_len, config.experts

        def stage(cin, cout):
            return nn.ModuleList(
                [MoEConvBlock(cin, cout, tl, e), MoEConvBlock(cout, cout, tl, e)]
            )

        self.enc = nn.ModuleList()
        cin = config.in_channels
        for width in w:
            self.enc.append(stage(cin, width))
            cin = width
        self.dec = nn.ModuleList()
        for lvl in range(len(w) - 2, -1, -1):
            self.dec.append(stage(w[lvl + 1] + w[lvl], w[lvl]))
        self.pool = nn.MaxPool3d(2)
        self.head = nn.Conv3d(w[0], config.out_channels, kernel_size=1)

    def _check_spatial(self, shape) -> None:
        mult = self.config.spatial_multiple
        if any(s % mult != 0 for s in shape):
            raise ValidationError(
                f"spatial dims {tuple(shape)} must be multiples of {mult} "
                f"for depth {self.config.depth}"
            )

    def forward(
        self, x: torch.Tensor, bits: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Run a batch: x [B, m, D, H, W], bits [B, token_len].

        Returns (logits [B, out_channels, D, H, W], bottleneck [B, F]).
        """
        if x.ndim != 5:
            raise ValidationError(f"expected [B, C, D, H, W] input, got {tuple(x.shape)}")
        if x.shape[1] != self.config.in_channels:
            raise ValidationError(
                f"input channels {x.shape[1]} != configured {self.config.in_channels}"
            )
        self._check_spatial(x.shape[2:])

        skips = []
        h = x
        for lvl, blocks in enumerate(self.enc):
            if lvl > 0:
                h = self.pool(h)
            for block in blocks:
                h = block(h, bits)
            skips.append(h)
        bottleneck = skips[-1].flatten(start_dim=1)

        for i, blocks in enumerate(self.dec):
            skip = skips[len(self.enc) - 2 - i]
            h = F.interpolate(h, scale_factor=2, mode="trilinear", align_corners=False)
            h = torch.cat([h, skip], dim=1)
            for block in blocks:
                h = block(h, bits)
        return self.head(h), bottleneck

    @torch.no_grad()
    def forward_sample(
        self, packed: np.ndarray, token: DomainToken, gate_bits: np.ndarray | None = None
    ) -> ForwardOutput:
        """Single-volume convenience wrapper around the batched forward."""
        dtype = next(self.parameters()).dtype
        x = torch.as_tensor(packed, dtype=dtype).unsqueeze(0)
        bits = gate_bits if gate_bits is not None else token.as_array()
        b = torch.as_tensor(np.asarray(bits), dtype=dtype).unsqueeze(0)
        logits, bottleneck = self.forward(x, b)
        return ForwardOutput(
            logits=logits[0].numpy(), bottleneck=bottleneck[0].numpy()
        )

    # -- stable parameter naming ------------------------------------------

    def _block_index(self) -> dict[str, MoEConvBlock]:
        named = {}
        for lvl, blocks in enumerate(self.enc):
            for j, block in enumerate(blocks):
                named[f"enc{lvl}.block{j}"] = block
        for i, blocks in enumerate(self.dec):
            lvl = len(self.enc) - 2 - i
            for j, block in enumerate(blocks):
                named[f"dec{lvl}.block{j}"] = block
        return named

    def param_dict(self) -> dict[str, torch.Tensor]:
        """All parameters keyed by the documented hierarchical names."""
        params: dict[str, torch.Tensor] = {}
        for prefix, block in self._block_index().items():
            for i, expert in enumerate(block.experts):
                params[f"{prefix}.expert{i}.kernel"] = expert.weight
                params[f"{prefix}.expert{i}.bias"] = expert.bias
            params[f"{prefix}.gate.W"] = block.gate.weight
            params[f"{prefix}.gate.b"] = block.gate.bias
            params[f"{prefix}.norm.gamma"] = block.norm.weight
            params[f"{prefix}.norm.beta"] = block.norm.bias
        params["head.kernel"] = self.head.weight
        params["head.bias"] = self.head.bias
        return params

    def load_param_dict(self, params: dict[str, np.ndarray]) -> None:
        own = self.param_dict()
        missing = sorted(set(own) - set(params))
        extra = sorted(set(params) - set(own))
        if missing or extra:
            raise ValidationError(f"parameter name mismatch: missing={missing} extra={extra}")
        with torch.no_grad():
            for name, tensor in own.items():
                value = torch.as_tensor(np.asarray(params[name]), dtype=tensor.dtype)
                if value.shape != tensor.shape:
                    raise ValidationError(
                        f"shape mismatch for {name}: {tuple(value.shape)} vs {tuple(tensor.shape)}"
                    )
                tensor.copy_(value)


def parameter_checksum(model: MoEUNet3D) -> str:
    """Order-stable SHA-256 over all parameter bytes; detects any drift."""
    digest = hashlib.sha256()
    for name in sorted(model.param_dict()):
        digest.update(name.encode())
        digest.update(model.param_dict()[name].detach().numpy().tobytes())
    return digest.hexdigest()


def save_checkpoint(model: MoEUNet3D, path) -> None:
    """Archive: config.json + one .npy entry per parameter (documented names)."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("config.json", json.dumps(model.config.to_dict(), indent=2))
        for name, tensor in model.param_dict().items():
            buf = io.BytesIO()
            np.save(buf, tensor.detach().numpy())
            zf.writestr(f"params/{name}.npy", buf.getvalue())


def load_checkpoint(path) -> MoEUNet3D:
    with zipfile.ZipFile(path) as zf:
        config = ModelConfig.from_dict(json.loads(zf.read("config.json")))
        params = {}
        for info in zf.infolist():
            if info.filename.startswith("params/") and info.filename.endswith(".npy"):
                name = info.filename[len("params/") : -len(".npy")]
                params[name] = np.load(io.BytesIO(zf.read(info.filename)))
    model = MoEUNet3D(config)
    model.load_param_dict(params)
    return model

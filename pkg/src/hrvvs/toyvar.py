"""Tiny visual autoregressive prior: multi-scale residual VQ plus a next-scale
transformer wrapped in trainable adapters.

A small VQ-VAE quantizes the latent of a view into five token maps of
strictly increasing resolution; each scale quantizes the residual left by
the coarser scales. Codebook index 0 is pinned to the zero vector and the
down/up resampling pair is an orthogonal projection, which together make the
cumulative latent approximation error provably non-increasing in the number
of scales. Per-scale VAE decoder features, channel-projected by learnable
adapters, serve as residual priors for the hierarchical encoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

DEFAULT_SCALES = (1, 2, 4, 8, 16)
VAE_STRIDE = 4  # two stride-2 convolutions in the latent encoder
FEATURE_UPSAMPLE = 2  # feature head upsamples each partial latent once


class ToyVarConfigError(ValueError):
    """Raised on inconsistent prior-model configuration."""


class ToyVarContractError(RuntimeError):
    """Raised on malformed token maps or out-of-schedule requests."""


class TrainingDiverged(RuntimeError):
    """Raised when a pretraining loss becomes non-finite."""


@dataclass
class ScaleSchedule:
    """Token-map side lengths, one per encoder stage, strictly increasing."""

    resolutions: tuple[int, ...] = DEFAULT_SCALES

    def __post_init__(self) -> None:
        if len(self.resolutions) != 5:
            raise ToyVarConfigError("schedule must list exactly 5 scales")
        if any(b <= a for a, b in zip(self.resolutions, self.resolutions[1:])):
            raise ToyVarConfigError("scales must be strictly increasing")

    @property
    def latent_side(self) -> int:
        return self.resolutions[-1]

    @property
    def native_side(self) -> int:
        return self.resolutions[-1] * VAE_STRIDE


@dataclass
class ToyVarConfig:
    codebook_size: int = 64
    codebook_dim: int = 32
    hidden_channels: int = 32
    scales: tuple[int, ...] = DEFAULT_SCALES
    embed_dim: int = 64
    depth: int = 2
    heads: int = 4
    stage_channels: tuple[int, ...] = (16, 32, 64, 128, 256)

    def __post_init__(self) -> None:
        if self.codebook_size < 2:
            raise ToyVarConfigError("codebook needs at least 2 entries")
        if self.embed_dim % self.heads != 0:
            raise ToyVarConfigError("embed_dim must be divisible by heads")


class Codebook(nn.Module):
    """K x d code vectors; row 0 is pinned to zero and never trained."""

    def __init__(self, size: int, dim: int) -> None:
        super().__init__()
        if size < 2:
            raise ToyVarConfigError("codebook needs at least 2 entries")
        self.size = size
        self.dim = dim
        self.free = nn.Parameter(torch.randn(size - 1, dim) * 0.3)

    @property
    def entries(self) -> torch.Tensor:
        zero = torch.zeros(1, self.dim, dtype=self.free.dtype, device=self.free.device)
        return torch.cat([zero, self.free], dim=0)

    def lookup(self, indices: torch.Tensor) -> torch.Tensor:
        """indices [...]-> vectors [..., dim]."""
        if indices.numel() and (indices.min() < 0 or indices.max() >= self.size):
            raise ToyVarContractError("token index out of codebook range")
        return F.embedding(indices, self.entries)

    def nearest(self, vectors: torch.Tensor) -> torch.Tensor:
        """vectors [..., dim] -> nearest entry indices [...] (first on ties).

        Distances come from explicit differences (not the expanded quadratic
        form), so the zero entry is never beaten by rounding artifacts and the
        residual-shrinkage guarantee of the quantizer holds numerically.
        """
        flat = vectors.reshape(-1, self.dim)
        d2 = ((flat.unsqueeze(1) - self.entries.unsqueeze(0)) ** 2).sum(-1)
        return d2.argmin(dim=-1).reshape(vectors.shape[:-1])


def _down(x: torch.Tensor, side: int) -> torch.Tensor:
    """Exact block-mean pooling of a [C, S, S] (or batched) map to side x side."""
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    out = F.adaptive_avg_pool2d(x, side)
    return out.squeeze(0) if squeeze else out


def _up(x: torch.Tensor, side: int) -> torch.Tensor:
    """Block-replicate (nearest) upsampling to side x side."""
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    out = F.interpolate(x, size=(side, side), mode="nearest")
    return out.squeeze(0) if squeeze else out


class VaeEncoder(nn.Module):
    def __init__(self, hidden: int, latent_dim: int) -> None:
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, hidden, 3, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(hidden, hidden, 3, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(hidden, latent_dim, 1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class VaeDecoder(nn.Module):
    """Latent-to-image decoder whose first two blocks double as feature heads."""

    def __init__(self, hidden: int, latent_dim: int) -> None:
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(latent_dim, hidden, 3, padding=1), nn.GELU())
        self.up1 = nn.Sequential(nn.Conv2d(hidden, hidden, 3, padding=1), nn.GELU())
        self.up2 = nn.Sequential(nn.Conv2d(hidden, hidden, 3, padding=1), nn.GELU())
        self.head = nn.Conv2d(hidden, 3, 3, padding=1)

    def features(self, latent: torch.Tensor) -> torch.Tensor:
        """One feature map per partial latent: stem then a single x2 upsample."""
        x = self.stem(latent)
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        return self.up1(x)

    def forward(self, latent: torch.Tensor) -> torch.Tensor:
        x = self.stem(latent)
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = self.up1(x)
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = self.up2(x)
        return self.head(x)


class BottleneckAdapter(nn.Module):
    """Residual down-project / GELU / up-project; zero-init so it starts as identity."""

    def __init__(self, dim: int, bottleneck: int | None = None) -> None:
        super().__init__()
        bottleneck = bottleneck or max(4, dim // 4)
        self.norm = nn.LayerNorm(dim)
        self.down = nn.Linear(dim, bottleneck)
        self.up = nn.Linear(bottleneck, dim)
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.up(F.gelu(self.down(self.norm(x))))


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int) -> None:
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))

    def forward(self, x: torch.Tensor, attn_mask: torch.Tensor) -> torch.Tensor:
        h = self.norm1(x)
        h, _ = self.attn(h, h, h, attn_mask=attn_mask, need_weights=False)
        x = x + h
        return x + self.mlp(self.norm2(x))


class NextScalePredictor(nn.Module):
    """Scale-by-scale token predictor with a block-causal attention mask.

    Positions of scale k are fed the cumulative dequantized latent of scales
    1..k-1 (the start token for k=1) and may attend to all positions of
    scales <= k, so the logits for scale k never depend on tokens of scale k
    or later. An adapter transforms the backbone output before the logit
    head; the backbone can be frozen while the adapter stays trainable.
    """

    def __init__(self, config: ToyVarConfig, codebook: Codebook) -> None:
        super().__init__()
        self.config = config
        self.schedule = ScaleSchedule(config.scales)
        self.codebook = codebook
        dim = config.embed_dim
        self.start_token = nn.Parameter(torch.randn(dim) * 0.02)
        self.word_embed = nn.Linear(config.codebook_dim, dim)
        self.level_embed = nn.Embedding(len(config.scales), dim)
        self.pos_embed = nn.Parameter(
            torch.randn(sum(s * s for s in config.scales), dim) * 0.02
        )
        self.blocks = nn.ModuleList(
            TransformerBlock(dim, config.heads) for _ in range(config.depth)
        )
        self.adapter = BottleneckAdapter(dim)
        self.head_norm = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, config.codebook_size)
        levels = torch.cat(
            [torch.full((s * s,), i, dtype=torch.long) for i, s in enumerate(config.scales)]
        )
        self.register_buffer("level_index", levels)

    def backbone_parameters(self) -> list[nn.Parameter]:
        named = dict(self.named_parameters())
        return [p for n, p in named.items() if not n.startswith("adapter.")]

    def _mask(self, n: int, dtype: torch.dtype, device: torch.device) -> torch.Tensor:
        lv = self.level_index[:n]
        allowed = lv.unsqueeze(1) >= lv.unsqueeze(0)
        mask = torch.zeros(n, n, dtype=dtype, device=device)
        mask.masked_fill_(~allowed, float("-inf"))
        return mask

    def _input_sequence(self, token_maps: list[torch.Tensor], upto: int) -> torch.Tensor:
        """Embedded inputs for scales 1..upto (teacher forcing), length sum s_k^2."""
        scales = self.config.scales
        latent_side = self.schedule.latent_side
        dtype = self.start_token.dtype
        device = self.start_token.device
        pieces = [self.start_token.reshape(1, -1)]
        f_hat = torch.zeros(
            self.config.codebook_dim, latent_side, latent_side, dtype=dtype, device=device
        )
        for k in range(1, upto):
            q = self.codebook.lookup(token_maps[k - 1]).permute(2, 0, 1)
            f_hat = f_hat + _up(q, latent_side)
            ctx = _down(f_hat, scales[k])  # d x s_k x s_k
            tokens = ctx.reshape(self.config.codebook_dim, -1).transpose(0, 1)
            pieces.append(self.word_embed(tokens))
        seq = torch.cat(pieces, dim=0)
        n = seq.shape[0]
        seq = seq + self.level_embed(self.level_index[:n]) + self.pos_embed[:n]
        return seq

    def forward(self, token_maps: list[torch.Tensor], upto: int | None = None) -> list[torch.Tensor]:
        """Teacher-forced logits for scales 1..upto as [s_k, s_k, K] tensors."""
        scales = self.config.scales
        upto = len(scales) if upto is None else upto
        if not 1 <= upto <= len(scales):
            raise ToyVarContractError(f"scale index {upto} outside schedule")
        if len(token_maps) < upto - 1:
            raise ToyVarContractError(
                f"need {upto - 1} context token maps for scale {upto}, got {len(token_maps)}"
            )
        for k in range(upto - 1):
            s = scales[k]
            if tuple(token_maps[k].shape) != (s, s):
                raise ToyVarContractError(f"context map {k + 1} must be {s}x{s}")
        x = self._input_sequence(token_maps, upto).unsqueeze(0)
        mask = self._mask(x.shape[1], x.dtype, x.device)
        for block in self.blocks:
            x = block(x, mask)
        x = self.adapter(x)
        logits = self.head(self.head_norm(x)).squeeze(0)
        out, offset = [], 0
        for k in range(upto):
            s = scales[k]
            out.append(logits[offset : offset + s * s].reshape(s, s, -1))
            offset += s * s
        return out

    def predict_scale(self, token_maps: list[torch.Tensor], k: int) -> torch.Tensor:
        """Logits for scale k given the start token and maps r_1..r_{k-1}."""
        return self.forward(token_maps[: k - 1], upto=k)[-1]

    @torch.no_grad()
    def greedy_decode(self) -> list[torch.Tensor]:
        """Deterministic argmax decode of all scales."""
        maps: list[torch.Tensor] = []
        for k in range(1, len(self.config.scales) + 1):
            logits = self.predict_scale(maps, k)
            maps.append(logits.argmax(dim=-1))
        return maps


class ToyVar(nn.Module):
    """The scaled-down autoregressive prior model used by the encoder branch."""

    def __init__(self, config: ToyVarConfig | None = None) -> None:
        super().__init__()
        self.config = config or ToyVarConfig()
        self.schedule = ScaleSchedule(self.config.scales)
        self.codebook = Codebook(self.config.codebook_size, self.config.codebook_dim)
        self.encoder = VaeEncoder(self.config.hidden_channels, self.config.codebook_dim)
        self.decoder = VaeDecoder(self.config.hidden_channels, self.config.codebook_dim)
        self.predictor = NextScalePredictor(self.config, self.codebook)
        self.prior_proj = nn.ModuleList(
            nn.Conv2d(self.config.hidden_channels, c, 1) for c in self.config.stage_channels
        )

    # -- quantization ----------------------------------------------------

    def _check_image(self, image: torch.Tensor) -> torch.Tensor:
        if image.dim() != 3 or image.shape[0] != 3:
            raise ToyVarContractError(f"expected 3xHxW image, got {tuple(image.shape)}")
        side = self.schedule.native_side
        h, w = image.shape[-2:]
        if h != w or h % side != 0:
            raise ToyVarContractError(
                f"image side must be square and divisible by the native side {side}, got {h}x{w}"
            )
        return image

    def _encode_latent(self, image: torch.Tensor) -> torch.Tensor:
        """Latent at exactly the finest schedule resolution (pooled if oversize)."""
        z = self.encoder(image.unsqueeze(0)).squeeze(0)
        if z.shape[-1] != self.schedule.latent_side:
            z = _down(z, self.schedule.latent_side)
        return z

    def _quantize_latent_batch(
        self, z: torch.Tensor
    ) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
        """Residual multi-scale quantization of latents z (B x d x S x S).

        Returns (token maps [B x s x s], cumulative dequantized latents).
        """
        latent_side = self.schedule.latent_side
        f_hat = torch.zeros_like(z)
        tokens, cumulative = [], []
        for s in self.config.scales:
            residual = z - f_hat
            r_small = _down(residual, s).permute(0, 2, 3, 1)
            idx = self.codebook.nearest(r_small)
            q = self.codebook.lookup(idx).permute(0, 3, 1, 2)
            f_hat = f_hat + _up(q, latent_side)
            tokens.append(idx)
            cumulative.append(f_hat)
        return tokens, cumulative

    def _quantize_latent(self, z: torch.Tensor) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
        """Single-image wrapper around :meth:`_quantize_latent_batch`."""
        tokens, cumulative = self._quantize_latent_batch(z.unsqueeze(0))
        return [t.squeeze(0) for t in tokens], [c.squeeze(0) for c in cumulative]

    def vq_encode(self, image: torch.Tensor) -> list[torch.Tensor]:
        """Image -> 5 token maps (sides per the scale schedule)."""
        image = self._check_image(image)
        z = self._encode_latent(image)
        tokens, _ = self._quantize_latent(z)
        return tokens

    def _cumulative_latents(self, tokens: list[torch.Tensor]) -> list[torch.Tensor]:
        scales = self.config.scales
        if len(tokens) != len(scales):
            raise ToyVarContractError(f"expected {len(scales)} token maps, got {len(tokens)}")
        latent_side = self.schedule.latent_side
        ref = self.codebook.entries
        f_hat = torch.zeros(
            self.config.codebook_dim, latent_side, latent_side, dtype=ref.dtype, device=ref.device
        )
        cumulative = []
        for k, s in enumerate(scales):
            if tuple(tokens[k].shape) != (s, s):
                raise ToyVarContractError(f"token map {k + 1} must be {s}x{s}")
            q = self.codebook.lookup(tokens[k]).permute(2, 0, 1)
            f_hat = f_hat + _up(q, latent_side)
            cumulative.append(f_hat)
        return cumulative

    def vq_decode(self, tokens: list[torch.Tensor]) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """Tokens -> (reconstruction, per-scale decoder feature maps).

        Feature map k comes from decoding the cumulative latent of scales
        1..k pooled to its native resolution; its side is the schedule
        resolution times the feature-head upsample factor.
        """
        cumulative = self._cumulative_latents(tokens)
        feats = []
        for k, s in enumerate(self.config.scales):
            partial = _down(cumulative[k], s)
            feats.append(self.decoder.features(partial.unsqueeze(0)).squeeze(0))
        recon = self.decoder(cumulative[-1].unsqueeze(0)).squeeze(0)
        return recon, feats

    def quantization_errors(self, image: torch.Tensor) -> list[float]:
        """RMS latent approximation error after each scale; non-increasing."""
        image = self._check_image(image)
        with torch.no_grad():
            z = self._encode_latent(image)
            _, cumulative = self._quantize_latent(z)
            return [float(torch.sqrt(torch.mean((z - f) ** 2))) for f in cumulative]

    # -- prediction -------------------------------------------------------

    def predict_next_scale(self, token_maps: list[torch.Tensor], k: int) -> torch.Tensor:
        """Logits s_k x s_k x K for scale k, conditioned on scales below k."""
        if not 1 <= k <= len(self.config.scales):
            raise ToyVarContractError(f"scale index {k} outside schedule")
        return self.predictor.predict_scale(token_maps, k)

    # -- priors ------------------------------------------------------------

    def extract_priors_batch(self, views: list[torch.Tensor]) -> list[list[torch.Tensor]]:
        """Per-stage residual prior maps for several same-sized views at once.

        Views are resampled to the prior model's native side, quantized,
        decoded into per-scale features, and each feature is channel-projected
        and resampled to the matching encoder stage grid (finest scale feeds
        the first stage). Gradients flow only through the projections.
        Returns priors indexed [view][stage-1].
        """
        if not views:
            return []
        for view in views:
            if view.dim() != 3:
                raise ToyVarContractError(f"expected 3xHxW views, got {tuple(view.shape)}")
            if view.shape != views[0].shape:
                raise ToyVarContractError("all views in one batch must share a shape")
        h, w = views[0].shape[-2:]
        side = self.schedule.native_side
        batch = torch.stack(views, dim=0)
        if (h, w) != (side, side):
            batch = F.interpolate(
                batch, size=(side, side), mode="bilinear", align_corners=False
            )
        with torch.no_grad():
            z = self.encoder(batch)
            if z.shape[-1] != self.schedule.latent_side:
                z = _down(z, self.schedule.latent_side)
            _, cumulative = self._quantize_latent_batch(z)
            raw_feats = [
                self.decoder.features(_down(cum, s))
                for s, cum in zip(self.config.scales, cumulative)
            ]
        n = len(self.config.scales)
        per_stage = []
        for stage in range(1, n + 1):
            feat = raw_feats[n - stage]  # finest scale -> shallowest stage
            proj = self.prior_proj[stage - 1](feat)
            target = (h // 2**stage, w // 2**stage)
            if proj.shape[-2:] != target:
                proj = F.interpolate(proj, size=target, mode="bilinear", align_corners=False)
            expected = self.config.stage_channels[stage - 1]
            if proj.shape[1] != expected:
                raise ToyVarConfigError(
                    f"prior projection for stage {stage} produced {proj.shape[1]} channels, expected {expected}"
                )
            per_stage.append(proj)
        return [[per_stage[i][m] for i in range(n)] for m in range(len(views))]

    def extract_priors(self, view: torch.Tensor) -> list[torch.Tensor]:
        """Per-stage residual prior maps for one view; see extract_priors_batch."""
        return self.extract_priors_batch([view])[0]

    # -- training ----------------------------------------------------------

    def backbone_parameters(self) -> list[nn.Parameter]:
        """Everything except the adapters: VAE, codebook, transformer backbone."""
        adapter_ids = {id(p) for p in self.adapter_parameters()}
        return [p for p in self.parameters() if id(p) not in adapter_ids]

    def adapter_parameters(self) -> list[nn.Parameter]:
        """Trainable adapter set: transformer-output adapter and prior projections."""
        params = list(self.predictor.adapter.parameters())
        params.extend(self.prior_proj.parameters())
        return params

    def freeze_backbone(self) -> None:
        for p in self.backbone_parameters():
            p.requires_grad_(False)

    def pretraining_losses(self, image: torch.Tensor) -> dict[str, torch.Tensor]:
        """Reconstruction, VQ, and next-scale cross-entropy terms for one image."""
        image = self._check_image(image)
        side = self.schedule.native_side
        if image.shape[-1] != side:
            image = F.interpolate(
                image.unsqueeze(0), size=(side, side), mode="bilinear", align_corners=False
            ).squeeze(0)
        z = self._encode_latent(image)
        f_hat = torch.zeros_like(z)
        latent_side = self.schedule.latent_side
        tokens = []
        vq_loss = z.new_zeros(())
        for s in self.config.scales:
            residual = z - f_hat
            r_small = _down(residual, s).permute(1, 2, 0)
            idx = self.codebook.nearest(r_small.detach())
            q = self.codebook.lookup(idx)
            vq_loss = vq_loss + F.mse_loss(q, r_small.detach()) + 0.25 * F.mse_loss(r_small, q.detach())
            f_hat = f_hat + _up(q.permute(2, 0, 1), latent_side)
            tokens.append(idx)
        f_hat_st = z + (f_hat - z).detach()  # straight-through to the encoder
        recon = self.decoder(f_hat_st.unsqueeze(0)).squeeze(0)
        recon_loss = F.mse_loss(recon, image)

        logits = self.predictor([t.detach() for t in tokens])
        ce = z.new_zeros(())
        for k, s in enumerate(self.config.scales):
            ce = ce + F.cross_entropy(
                logits[k].reshape(s * s, -1), tokens[k].detach().reshape(s * s)
            )
        ce = ce / len(self.config.scales)
        return {"recon": recon_loss, "vq": vq_loss, "ce": ce}


def pretrain(
    model: ToyVar,
    frames: list[torch.Tensor],
    steps: int,
    lr: float = 1e-3,
    batch_size: int = 8,
    seed: int = 0,
) -> dict[str, list[float]]:
    """Joint VQ-VAE + next-scale pretraining on a frame corpus.

    Returns the per-step loss history (recon / vq / ce / total). Zero steps
    leaves the weights untouched. Raises :class:`TrainingDiverged` on a
    non-finite loss.
    """
    if not frames:
        raise ToyVarContractError("pretraining corpus is empty")
    history: dict[str, list[float]] = {"recon": [], "vq": [], "ce": [], "total": []}
    if steps == 0:
        return history
    gen = torch.Generator().manual_seed(seed)
    optim = torch.optim.Adam(model.parameters(), lr=lr)
    model.train()
    for _ in range(steps):
        pick = torch.randint(0, len(frames), (min(batch_size, len(frames)),), generator=gen)
        terms = {"recon": 0.0, "vq": 0.0, "ce": 0.0}
        total = None
        for j in pick.tolist():
            losses = model.pretraining_losses(frames[j])
            step_total = losses["recon"] + losses["vq"] + losses["ce"]
            total = step_total if total is None else total + step_total
            for name in terms:
                terms[name] += float(losses[name].detach())
        total = total / len(pick)
        if not math.isfinite(float(total.detach())):
            raise TrainingDiverged("pretraining loss is not finite")
        optim.zero_grad()
        total.backward()
        optim.step()
        for name in terms:
            history[name].append(terms[name] / len(pick))
        history["total"].append(float(total.detach()))
    model.eval()
    return history

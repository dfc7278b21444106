"""End-to-end forecasting model.

Pipeline per window: instance-normalize, decompose, patch each component,
concatenate into a meta token, project into the backbone width, retrieve the
top-K anchors as a prefix, run the frozen backbone, project the patch
positions onto per-component horizons, sum the components, and invert the
instance normalization.

The trainable set is: input projection, output projection, anchor map,
per-channel normalization affine parameters, and whatever the backbone
policy allows (positional embeddings and layer norms by default).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import Backbone, BackboneConfig, TrainabilityPolicy, default_policy
from .preprocess import (DEFAULT_EPSILON, PatchSpec, RevInState, decompose,
                         patch, patch_count, revin_denormalize)
from .prompt import (AnchorBank, EmbeddingMatrix, PromptSelection,
                     alignment_term, prefix_concat, retrieve_topk)
from .series import WindowSpec


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class DecompositionConfig:
    enabled: bool = True
    period: int = 24
    trend_window: int = 25
    method: str = "classical"
    stl_inner: int = 2

    def __post_init__(self):
        if self.method not in ("classical", "stl"):
            raise ModelError(f"unknown decomposition method {self.method!r}")


@dataclass(frozen=True)
class ModelConfig:
    window: WindowSpec = field(default_factory=lambda: WindowSpec(96, 24))
    patch: PatchSpec = field(default_factory=lambda: PatchSpec(16, 8))
    decomposition: DecompositionConfig = field(default_factory=DecompositionConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    prompt_k: int = 4
    n_anchors: int = 32
    alignment_weight: float = 0.01
    include_prompt_in_output: bool = False
    pooling: str = "mean"
    n_channels: int = 1
    revin_epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if self.prompt_k < 0:
            raise ModelError("prompt_k must be >= 0 (0 disables prompting)")
        if self.n_anchors < 1:
            raise ModelError("n_anchors must be positive")
        if self.prompt_k > self.n_anchors:
            raise ModelError(f"prompt_k {self.prompt_k} exceeds n_anchors "
                             f"{self.n_anchors}")
        if self.alignment_weight < 0:
            raise ModelError("alignment_weight must be >= 0")
        if self.pooling not in ("mean", "per_patch"):
            raise ModelError(f"unknown pooling mode {self.pooling!r}")
        if self.n_channels < 1:
            raise ModelError("n_channels must be positive")
        if self.revin_epsilon <= 0:
            raise ModelError("revin_epsilon must be positive")
        if self.patch.patch_length > self.window.lookback:
            raise ModelError(f"patch_length {self.patch.patch_length} exceeds "
                             f"lookback {self.window.lookback}")
        if self.decomposition.enabled:
            tau = self.window.lookback
            if not 2 <= self.decomposition.period <= tau // 2:
                raise ModelError(f"decomposition period must lie in [2, {tau // 2}] "
                                 f"for lookback {tau}")
            tw = self.decomposition.trend_window
            if tw % 2 == 0 or tw > tau:
                raise ModelError(f"trend_window must be odd and <= {tau}, got {tw}")
        if self.prompt_k + self.n_patches > self.backbone.max_seq_len:
            raise ModelError(f"prompt_k + n_patches = "
                             f"{self.prompt_k + self.n_patches} exceeds "
                             f"max_seq_len {self.backbone.max_seq_len}")

    @property
    def n_patches(self) -> int:
        return patch_count(self.window.lookback, self.patch)

    @property
    def n_components(self) -> int:
        return 3 if self.decomposition.enabled else 1

    @property
    def meta_width(self) -> int:
        return self.n_components * self.patch.patch_length

    @property
    def output_dim(self) -> int:
        return self.n_components * self.window.horizon

    @property
    def flattened_width(self) -> int:
        positions = self.n_patches
        if self.include_prompt_in_output:
            positions += self.prompt_k
        return positions * self.backbone.embed_dim

    def to_dict(self) -> dict:
        return {
            "window.lookback": self.window.lookback,
            "window.horizon": self.window.horizon,
            "window.stride": self.window.stride,
            "patch.length": self.patch.patch_length,
            "patch.stride": self.patch.stride,
            "decomposition.enabled": self.decomposition.enabled,
            "decomposition.period": self.decomposition.period,
            "decomposition.trend_window": self.decomposition.trend_window,
            "decomposition.method": self.decomposition.method,
            "decomposition.stl_inner": self.decomposition.stl_inner,
            "backbone.embed_dim": self.backbone.embed_dim,
            "backbone.n_layers": self.backbone.n_layers,
            "backbone.n_heads": self.backbone.n_heads,
            "backbone.max_seq_len": self.backbone.max_seq_len,
            "backbone.ffn_mult": self.backbone.ffn_mult,
            "backbone.dropout": self.backbone.dropout,
            "prompt_k": self.prompt_k,
            "n_anchors": self.n_anchors,
            "alignment_weight": self.alignment_weight,
            "include_prompt_in_output": self.include_prompt_in_output,
            "pooling": self.pooling,
            "n_channels": self.n_channels,
            "revin_epsilon": self.revin_epsilon,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            window=WindowSpec(int(d["window.lookback"]), int(d["window.horizon"]),
                              int(d["window.stride"])),
            patch=PatchSpec(int(d["patch.length"]), int(d["patch.stride"])),
            decomposition=DecompositionConfig(
                enabled=bool(d["decomposition.enabled"]),
                period=int(d["decomposition.period"]),
                trend_window=int(d["decomposition.trend_window"]),
                method=str(d["decomposition.method"]),
                stl_inner=int(d["decomposition.stl_inner"])),
            backbone=BackboneConfig(
                embed_dim=int(d["backbone.embed_dim"]),
                n_layers=int(d["backbone.n_layers"]),
                n_heads=int(d["backbone.n_heads"]),
                max_seq_len=int(d["backbone.max_seq_len"]),
                ffn_mult=int(d["backbone.ffn_mult"]),
                dropout=float(d["backbone.dropout"])),
            prompt_k=int(d["prompt_k"]),
            n_anchors=int(d["n_anchors"]),
            alignment_weight=float(d["alignment_weight"]),
            include_prompt_in_output=bool(d["include_prompt_in_output"]),
            pooling=str(d["pooling"]),
            n_channels=int(d["n_channels"]),
            revin_epsilon=float(d["revin_epsilon"]),
        )


@dataclass
class ForecastResult:
    forecast: np.ndarray                # denormalized, length horizon
    selection: PromptSelection
    ts_embed: Tensor                    # (N_P, D)
    normalized_forecast: np.ndarray     # pre-denormalization, length horizon
    normalized_components: np.ndarray   # (n_components, horizon)
    revin_state: RevInState
    forecast_tensor: Tensor             # differentiable denormalized forecast


class ForecastModel:
    def __init__(self, config: ModelConfig, embedding: EmbeddingMatrix,
                 seed: int = 0, policy: TrainabilityPolicy | None = None):
        if embedding.dim != config.backbone.embed_dim:
            raise ModelError(f"embedding width {embedding.dim} != backbone width "
                             f"{config.backbone.embed_dim}")
        self.config = config
        self.embedding = embedding
        self.policy = policy if policy is not None else default_policy()
        rng = np.random.default_rng(seed)
        self.backbone = Backbone(config.backbone, seed=int(rng.integers(2 ** 31)))
        self._backbone_trainable = self.backbone.apply_policy(self.policy)
        self.bank = AnchorBank(embedding, config.n_anchors, rng=rng)
        d = config.backbone.embed_dim
        self.params: dict[str, Tensor] = {
            "input_projection.weight": Tensor(
                rng.normal(0.0, 0.02, size=(config.meta_width, d)),
                requires_grad=True),
            "input_projection.bias": Tensor(np.zeros(d), requires_grad=True),
            "output_projection.weight": Tensor(
                rng.normal(0.0, 0.02, size=(config.flattened_width,
                                            config.output_dim)),
                requires_grad=True),
            "output_projection.bias": Tensor(np.zeros(config.output_dim),
                                             requires_grad=True),
            "revin.gamma": Tensor(np.ones(config.n_channels), requires_grad=True),
            "revin.beta": Tensor(np.zeros(config.n_channels), requires_grad=True),
        }

    # -- parameter bookkeeping ----------------------------------------------

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        """Every trainable tensor, exactly once, in a stable order."""
        out = [(name, t) for name, t in sorted(self.params.items())]
        out.append(("anchor_map.weight", self.bank.map_weights))
        out.extend((f"backbone.{name}", t) for name, t in self._backbone_trainable)
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def all_arrays(self) -> dict[str, np.ndarray]:
        """Every array needed to reproduce the model bit-for-bit."""
        out = {name: t.data for name, t in self.params.items()}
        out["anchor_map.weight"] = self.bank.map_weights.data
        for name, t in self.backbone.params.items():
            out[f"backbone.{name}"] = t.data
        out["embedding.values"] = self.embedding.values
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        expected = self.all_arrays()
        missing = sorted(set(expected) - set(arrays))
        if missing:
            raise ModelError(f"checkpoint is missing tensors: {missing}")
        extra = sorted(set(arrays) - set(expected))
        if extra:
            raise ModelError(f"checkpoint has unexpected tensors: {extra}")
        for name, arr in arrays.items():
            if arr.shape != expected[name].shape:
                raise ModelError(f"checkpoint tensor {name!r} has shape "
                                 f"{arr.shape}, expected {expected[name].shape}")
        for name, tensor in self.params.items():
            tensor.data = np.ascontiguousarray(arrays[name])
        self.bank.map_weights.data = np.ascontiguousarray(arrays["anchor_map.weight"])
        for name, tensor in self.backbone.params.items():
            tensor.data = np.ascontiguousarray(arrays[f"backbone.{name}"])

    def _channel_scalar(self, name: str, channel: int) -> Tensor:
        if not 0 <= channel < self.config.n_channels:
            raise ModelError(f"channel {channel} out of range "
                             f"[0, {self.config.n_channels})")
        return ad.gather_rows(self.params[name], [channel])

    # -- tokenization --------------------------------------------------------

    def tokenize_and_embed(self, x: np.ndarray, channel: int = 0
                           ) -> tuple[Tensor, RevInState]:
        """Normalize, decompose, patch, and project one window.

        The data-dependent part of the normalization (z-scoring by instance
        statistics) commutes with the linear decomposition and patching, so
        those run on plain arrays; the trainable affine pair is applied on
        the tape afterwards, which keeps the whole map differentiable.
        """
        cfg = self.config
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (cfg.window.lookback,):
            raise ModelError(f"window must have length {cfg.window.lookback}, "
                             f"got shape {x.shape}")
        mean = float(x.mean())
        var = float(x.var())
        gamma_t = self._channel_scalar("revin.gamma", channel)
        beta_t = self._channel_scalar("revin.beta", channel)
        state = RevInState(mean=mean, variance=var,
                           gamma=float(gamma_t.data[0]),
                           beta=float(beta_t.data[0]),
                           epsilon=cfg.revin_epsilon)
        z = (x - mean) / state.scale

        lp = cfg.patch.patch_length
        if cfg.decomposition.enabled:
            dec = decompose(z, cfg.decomposition.period,
                            cfg.decomposition.trend_window,
                            method=cfg.decomposition.method,
                            **({"inner_iterations": cfg.decomposition.stl_inner}
                               if cfg.decomposition.method == "stl" else {}))
            meta_z = np.hstack([patch(dec.trend, cfg.patch),
                                patch(dec.seasonal, cfg.patch),
                                patch(dec.residual, cfg.patch)])
            # the shift parameter lands on the trend block only
            shift_mask = np.hstack([np.ones((meta_z.shape[0], lp)),
                                    np.zeros((meta_z.shape[0], 2 * lp))])
        else:
            meta_z = patch(z, cfg.patch)
            shift_mask = np.ones_like(meta_z)

        meta = ad.add(ad.mul(Tensor(meta_z), gamma_t),
                      ad.mul(Tensor(shift_mask), beta_t))
        ts_embed = ad.add(ad.matmul(meta, self.params["input_projection.weight"]),
                          self.params["input_projection.bias"])
        return ts_embed, state

    # -- forward -------------------------------------------------------------

    def _prompted(self, ts_embed: Tensor, anchors: Tensor | None
                  ) -> tuple[Tensor, PromptSelection]:
        k = self.config.prompt_k
        if k == 0 or anchors is None:
            return ts_embed, PromptSelection((), ())
        selection = retrieve_topk(ts_embed.data, self.bank, k,
                                  pooling=self.config.pooling)
        selected = ad.gather_rows(anchors, list(selection.indices))
        return prefix_concat(selected, ts_embed), selection

    def _head(self, z_out: Tensor) -> Tensor:
        """Project backbone outputs to per-component horizons and sum them.

        Prompt positions are dropped before flattening unless configured
        otherwise, so the projection width does not depend on K.
        """
        cfg = self.config
        batch = z_out.shape[0]
        k = cfg.prompt_k
        if k > 0 and not cfg.include_prompt_in_output:
            start, length = k, cfg.n_patches
        else:
            start, length = 0, z_out.shape[1]
        kept = ad.narrow(z_out, 1, start, length)
        flat = ad.reshape(kept, (batch, length * cfg.backbone.embed_dim))
        return ad.add(ad.matmul(flat, self.params["output_projection.weight"]),
                      self.params["output_projection.bias"])

    def _recombine(self, y_out: Tensor) -> Tensor:
        cfg = self.config
        if not cfg.decomposition.enabled:
            return y_out
        h = cfg.window.horizon
        parts = [ad.narrow(y_out, 1, i * h, h) for i in range(3)]
        return ad.add(ad.add(parts[0], parts[1]), parts[2])

    def _denormalize_rows(self, y_norm: Tensor, channels: list[int],
                          states: list[RevInState]) -> Tensor:
        rows = []
        for i, (channel, state) in enumerate(zip(channels, states)):
            gamma_t = self._channel_scalar("revin.gamma", channel)
            beta_t = self._channel_scalar("revin.beta", channel)
            row = ad.narrow(y_norm, 0, i, 1)
            row = ad.div(ad.sub(row, beta_t), gamma_t)
            rows.append(ad.add(ad.mul(row, state.scale), state.mean))
        return rows[0] if len(rows) == 1 else ad.concat(rows, axis=0)

    def forward_forecast(self, x: np.ndarray, channel: int = 0) -> ForecastResult:
        """Forecast one window; returns the denormalized prediction along
        with the intermediate pieces tests and exports need."""
        anchors = self.bank.anchors_tensor() if self.config.prompt_k > 0 else None
        ts_embed, state = self.tokenize_and_embed(x, channel)
        z_in, selection = self._prompted(ts_embed, anchors)
        length, d = z_in.shape
        z_out = self.backbone.forward(ad.reshape(z_in, (1, length, d)))
        y_out = self._head(z_out)
        y_norm = self._recombine(y_out)
        yhat = self._denormalize_rows(y_norm, [channel], [state])
        h = self.config.window.horizon
        components = y_out.data.reshape(self.config.n_components, h)
        return ForecastResult(
            forecast=yhat.data.reshape(h).copy(),
            selection=selection,
            ts_embed=ts_embed,
            normalized_forecast=y_norm.data.reshape(h).copy(),
            normalized_components=components.copy(),
            revin_state=state,
            forecast_tensor=yhat,
        )

    def joint_loss(self, batch, alignment_weight: float | None = None) -> Tensor:
        """Mean-squared forecast error minus the (weighted) batch-mean
        alignment bonus; the training objective."""
        if not batch:
            raise ModelError("joint_loss needs a nonempty batch")
        lam = (self.config.alignment_weight if alignment_weight is None
               else float(alignment_weight))
        if lam < 0:
            raise ModelError("alignment weight must be >= 0")
        cfg = self.config
        anchors = self.bank.anchors_tensor() if cfg.prompt_k > 0 else None

        z_ins, selections, ts_embeds, states, channels, targets = [], [], [], [], [], []
        for channel, x, y in batch:
            ts_embed, state = self.tokenize_and_embed(x, channel)
            z_in, selection = self._prompted(ts_embed, anchors)
            length, d = z_in.shape
            z_ins.append(ad.reshape(z_in, (1, length, d)))
            selections.append(selection)
            ts_embeds.append(ts_embed)
            states.append(state)
            channels.append(channel)
            targets.append(np.asarray(y, dtype=np.float64))

        z_out = self.backbone.forward(z_ins[0] if len(z_ins) == 1
                                      else ad.concat(z_ins, axis=0))
        y_norm = self._recombine(self._head(z_out))
        yhat = self._denormalize_rows(y_norm, channels, states)
        target_t = Tensor(np.stack(targets))
        err = ad.sub(yhat, target_t)
        loss = ad.tmean(ad.mul(err, err))

        if cfg.prompt_k > 0 and anchors is not None:
            terms = [ad.reshape(alignment_term(e, s, self.bank,
                                               pooling=cfg.pooling,
                                               anchors=anchors), (1,))
                     for e, s in zip(ts_embeds, selections)]
            bonus = ad.tmean(ad.concat(terms, axis=0))
            loss = ad.sub(loss, ad.mul(bonus, lam))
        return loss


def recombine_and_denormalize(y_out: np.ndarray, state: RevInState) -> np.ndarray:
    """Split a concatenated component forecast into three equal segments
    (trend, seasonal, residual), sum them, and invert the normalization."""
    y_out = np.asarray(y_out, dtype=np.float64)
    if y_out.ndim != 1 or y_out.size % 3 != 0:
        raise ad.ShapeError(f"component vector length {y_out.shape} is not "
                            "divisible into three segments")
    h = y_out.size // 3
    combined = y_out[:h] + y_out[h:2 * h] + y_out[2 * h:]
    return revin_denormalize(combined, state)

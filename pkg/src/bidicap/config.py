"""Flat key-value run configuration.

One namespace covers model, training, decoding and corpus-generation knobs
plus paths and the seed. Every key has a default below; unknown keys are
rejected; the effective configuration is echoed into the run directory before
any side effect.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

from .data import SynthSpec
from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig

# key -> (default, help)
DEFAULTS: dict[str, tuple] = {
    "seed": (0, "base random seed; all streams derive from it"),
    "run_dir": ("runs/default", "output directory: config echo, checkpoints, logs"),
    "data_dir": ("data/synth", "directory holding {train,val,test}.jsonl and vocab.json"),
    # model
    "d_model": (512, "residual stream width"),
    "d_k": (64, "per-head query/key depth"),
    "d_v": (64, "per-head value depth (n_heads*d_v must equal d_model)"),
    "d_ff": (2048, "position-wise feed-forward inner width"),
    "n_layers": (6, "encoder and decoder layer count"),
    "n_heads": (8, "attention heads"),
    "p_dropout": (0.1, "dropout rate"),
    "lambda": (0.1, "cross-flow attention weight (0 disables interaction)"),
    "af": ("relu", "activation on the cross-flow attention term: relu|tanh"),
    "max_len": (16, "caption content-token cap"),
    "feature_dim": (48, "region feature dimensionality"),
    # training
    "batch_size": (10, "pairs per cross-entropy step / images per self-critical step"),
    "xe_epochs": (15, "cross-entropy epochs"),
    "base_lr": (5e-4, "peak learning rate of the warmup schedule"),
    "warmup_steps": (20000, "schedule warmup length in steps"),
    "ss_increment": (0.05, "scheduled-sampling probability increment"),
    "ss_every_epochs": (5, "epochs between scheduled-sampling increments"),
    "ss_max": (0.25, "scheduled-sampling probability ceiling"),
    "sc_epochs": (15, "self-critical epochs"),
    "sc_lr": (1e-5, "fixed self-critical learning rate"),
    "n_samples": (5, "self-critical samples per direction and image"),
    "reward": ("cider", "self-critical reward: cider|cider-d"),
    "grad_clip": (5.0, "global gradient-norm clip"),
    "adam_beta1": (0.9, "Adam beta1"),
    "adam_beta2": (0.98, "Adam beta2"),
    "adam_eps": (1e-9, "Adam epsilon"),
    "xe_sum_loss": (False, "use the raw summed loss instead of per-token mean"),
    "sc_images_per_epoch": (0, "image subsample per self-critical epoch (0 = all)"),
    "val_decode": ("greedy", "decoding used for validation: greedy|beam"),
    "flows": ("both", "training objective: both | fwd | bwd (unidirectional baseline)"),
    # decoding
    "total_beam": (4, "total beam budget, split evenly between the flows"),
    "length_norm": ("none", "sentence-level ranking score: none|avg"),
    "decode_method": ("beam", "decode command method: beam|greedy"),
    "decode_split": ("test", "dataset split to decode/score"),
    "checkpoint": ("", "checkpoint path(s) for decode, comma-separated for ensembles"),
    "decode_out": ("", "decode records output path (default: run_dir/decodes/<split>.jsonl)"),
    "candidates": ("", "decode records path for the score command"),
    # synthetic corpus
    "synth_train_images": (2000, "training images to generate"),
    "synth_val_images": (200, "validation images to generate"),
    "synth_test_images": (200, "test images to generate"),
    "synth_regions": (6, "regions per image"),
    "synth_attributes": (4, "active latent attribute kinds (2..4)"),
    "synth_noise": (0.1, "region feature noise standard deviation"),
    "refs_per_image": (5, "reference captions per image"),
    "min_count": (5, "vocabulary frequency threshold"),
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    def __getitem__(self, key: str):
        return self.values[key]

    def __contains__(self, key):
        return key in self.values

    @staticmethod
    def load(path: str | None = None, overrides: dict | None = None) -> "RunConfig":
        values = {k: v for k, (v, _) in DEFAULTS.items()}
        if path is not None:
            with open(path, encoding="utf-8") as f:
                file_values = json.load(f)
            if not isinstance(file_values, dict):
                raise ConfigError(f"{path}: config file must hold a flat JSON object")
            for k, v in file_values.items():
                values[k] = _coerce(k, v)
        for k, v in (overrides or {}).items():
            values[k] = _coerce(k, v)
        return RunConfig(values)

    def model_config(self, vocab_size: int) -> ModelConfig:
        v = self.values
        return ModelConfig(
            vocab_size=vocab_size, feature_dim=v["feature_dim"], d_model=v["d_model"],
            d_k=v["d_k"], d_v=v["d_v"], d_ff=v["d_ff"], n_layers=v["n_layers"],
            n_heads=v["n_heads"], p_dropout=v["p_dropout"], lam=v["lambda"],
            af=v["af"], max_len=v["max_len"],
        ).validate()

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            batch_size=v["batch_size"], xe_epochs=v["xe_epochs"], base_lr=v["base_lr"],
            warmup_steps=v["warmup_steps"], ss_increment=v["ss_increment"],
            ss_every_epochs=v["ss_every_epochs"], ss_max=v["ss_max"],
            sc_epochs=v["sc_epochs"], sc_lr=v["sc_lr"], n_samples=v["n_samples"],
            reward=v["reward"], grad_clip=v["grad_clip"], adam_beta1=v["adam_beta1"],
            adam_beta2=v["adam_beta2"], adam_eps=v["adam_eps"],
            xe_sum_loss=v["xe_sum_loss"], sc_images_per_epoch=v["sc_images_per_epoch"],
            val_decode=v["val_decode"],
        ).validate()

    def synth_spec(self) -> SynthSpec:
        v = self.values
        return SynthSpec(
            n_train=v["synth_train_images"], n_val=v["synth_val_images"],
            n_test=v["synth_test_images"], n_regions=v["synth_regions"],
            feature_dim=v["feature_dim"], n_attributes=v["synth_attributes"],
            noise_std=v["synth_noise"], refs_per_image=v["refs_per_image"],
            seed=v["seed"],
        ).validate()

    def decode_config(self):
        from .decoding import DecodeConfig

        return DecodeConfig(total_beam=self.values["total_beam"],
                            length_norm=self.values["length_norm"]).validate()

    def echo(self, run_dir: str | None = None) -> str:
        """Write the effective configuration into the run directory."""
        run_dir = run_dir or self.values["run_dir"]
        os.makedirs(run_dir, exist_ok=True)
        path = os.path.join(run_dir, "config.json")
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.values, f, indent=2, sort_keys=True)
        return path


def _coerce(key: str, raw):
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    default = DEFAULTS[key][0]
    try:
        if isinstance(default, bool):
            if isinstance(raw, bool):
                return raw
            if str(raw).lower() in ("1", "true", "yes"):
                return True
            if str(raw).lower() in ("0", "false", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return str(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"config key {key!r}: cannot interpret {raw!r}")


def parse_overrides(items) -> dict:
    """Parse repeated key=value override arguments."""
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out

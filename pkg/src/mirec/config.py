"""Flat `key = value` run configuration.

One namespace covers the model hyperparameters, the training loop, the data
split, and the output location. Unknown keys are rejected by name. A run's
fully-resolved config is rendered back to the same format and written next
to its outputs, so any run can be reproduced from that file alone.
"""

import hashlib
from dataclasses import dataclass, fields

from .model import HyperParams
from .trainer import TrainConfig


def _as_bool(s):
    low = str(s).strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _as_opt_int(s):
    low = str(s).strip().lower()
    if low in ("", "none"):
        return None
    return int(s)


def _as_threshold(s):
    s = str(s).strip()
    if s == "adaptive":
        return s
    return float(s)


@dataclass
class RunConfig:
    # data
    dataset: str = ""
    output_dir: str = "run"
    seed: int = 0
    train_ratio: float = 0.8
    valid_ratio: float = 0.1
    test_ratio: float = 0.1
    min_interactions: int = 5
    holdout_frac: float = 0.2
    # model
    embed_dim: int = 64
    att_hidden_dim: int = 256
    recon_hidden_dim: int = 32
    num_interests: int = 8
    max_seq_len: int = 20
    temperature: float = 0.02
    pos_threshold: object = "adaptive"
    lambda_cl: float = 0.0
    lambda_att: float = 0.0
    lambda_ct: float = 0.0
    num_rec_negatives: int = 128
    num_seq_negatives: object = None
    logq_correction: bool = False
    # training
    epochs: int = 30
    batch_size: int = 128
    eval_every: int = 1
    patience: int = 0
    lr: float = 0.003
    weight_decay: float = 1e-5
    clip_norm: float = 5.0
    # evaluation / diagnostics
    cutoffs: str = "20,50"
    diag_k: object = None
    diag_init: str = "kmeanspp"

    def hyperparams(self):
        return HyperParams(
            embed_dim=self.embed_dim,
            att_hidden_dim=self.att_hidden_dim,
            recon_hidden_dim=self.recon_hidden_dim,
            num_interests=self.num_interests,
            max_seq_len=self.max_seq_len,
            temperature=self.temperature,
            pos_threshold=self.pos_threshold,
            lambda_contrast=self.lambda_cl,
            lambda_attend=self.lambda_att,
            lambda_reconstruct=self.lambda_ct,
            num_rec_negatives=self.num_rec_negatives,
            num_seq_negatives=self.num_seq_negatives,
            logq_correction=self.logq_correction,
        )

    def train_config(self, checkpoint_path="", log_path=""):
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, seed=self.seed,
            eval_every=self.eval_every, patience=self.patience,
            checkpoint_path=checkpoint_path, log_path=log_path,
            lr=self.lr, weight_decay=self.weight_decay,
            clip_norm=self.clip_norm,
        )

    def split_kwargs(self):
        return dict(
            ratios=(self.train_ratio, self.valid_ratio, self.test_ratio),
            seed=self.seed, min_interactions=self.min_interactions,
            holdout_frac=self.holdout_frac,
        )

    def cutoff_list(self):
        vals = []
        for tok in str(self.cutoffs).split(","):
            tok = tok.strip()
            if not tok:
                continue
            n = int(tok)
            if n < 1:
                raise ValueError(f"cutoff must be >= 1, got {n}")
            vals.append(n)
        if not vals:
            raise ValueError("cutoffs is empty")
        return tuple(sorted(set(vals)))


_CASTERS = {
    "dataset": str,
    "output_dir": str,
    "seed": int,
    "train_ratio": float,
    "valid_ratio": float,
    "test_ratio": float,
    "min_interactions": int,
    "holdout_frac": float,
    "embed_dim": int,
    "att_hidden_dim": int,
    "recon_hidden_dim": int,
    "num_interests": int,
    "max_seq_len": int,
    "temperature": float,
    "pos_threshold": _as_threshold,
    "lambda_cl": float,
    "lambda_att": float,
    "lambda_ct": float,
    "num_rec_negatives": int,
    "num_seq_negatives": _as_opt_int,
    "logq_correction": _as_bool,
    "epochs": int,
    "batch_size": int,
    "eval_every": int,
    "patience": int,
    "lr": float,
    "weight_decay": float,
    "clip_norm": float,
    "cutoffs": str,
    "diag_k": _as_opt_int,
    "diag_init": str,
}


def parse_config_text(text, source="<config>"):
    """Flat `key = value` lines into a raw string dict; comments start with #."""
    raw = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValueError(f"{source}: line {lineno}: expected `key = value`, "
                             f"got {stripped!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if key not in _CASTERS:
            raise ValueError(f"{source}: line {lineno}: unknown config key {key!r}")
        if key in raw:
            raise ValueError(f"{source}: line {lineno}: duplicate key {key!r}")
        raw[key] = value.strip()
    return raw


def apply_overrides(raw, overrides):
    """--set key=value pairs; later overrides win, unknown keys rejected."""
    out = dict(raw)
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        key, _, value = item.partition("=")
        key = key.strip()
        if key not in _CASTERS:
            raise ValueError(f"unknown config key {key!r}")
        out[key] = value.strip()
    return out


def resolve(raw):
    """Typed RunConfig from raw strings; casting errors name the key."""
    kwargs = {}
    for key, value in raw.items():
        try:
            kwargs[key] = _CASTERS[key](value)
        except ValueError as exc:
            raise ValueError(f"config key {key!r}: {exc}") from exc
    return RunConfig(**kwargs)


def load_config(path, overrides=()):
    with open(path, encoding="utf-8") as fh:
        raw = parse_config_text(fh.read(), source=path)
    return resolve(apply_overrides(raw, overrides))


def default_config(overrides=()):
    return resolve(apply_overrides({}, overrides))


def _format_value(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def render(config):
    """Fully-resolved config back in flat form, stable field order."""
    lines = [f"{f.name} = {_format_value(getattr(config, f.name))}"
             for f in fields(RunConfig)]
    return "\n".join(lines) + "\n"


def config_hash(config):
    """Short digest of the resolved config; goes into report records."""
    return hashlib.sha256(render(config).encode("utf-8")).hexdigest()[:12]

"""Experiment configuration: flat dotted keys, defaults, parsing, validation.

Configs are a human-editable key/value text document::

    # comment lines start with '#'
    strategy = pfpl
    alpha = 0.5
    partition.n = 3,4,5
    partition.k = 40:60

plus flag overrides; precedence is built-in defaults < config file < flags.
A resolved config echoes to JSON (flat dotted keys) and parses back
identically, so any run can be reproduced from its own artifacts.

Defaults pin the desk-scale benchmark; the optimizer values (eta 0.01,
momentum 0.9, weight decay 1e-5, batch 4) and lambda = 1, alpha = 0.5 are the
reference operating point.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .data_domains import (
    PartitionPlan,
    default_domain_specs,
    load_csv,
    load_idx,
    make_synthetic_domain,
)
from .errors import ConfigurationError
from .rng import derive_seed, substream

STRATEGIES = ("pfpl", "global_proto", "unbiased_proto", "fedavg", "local_only")
WEIGHT_MODES = ("similarity", "paper_literal")
SOURCES = ("synthetic", "csv", "idx")


@dataclass
class ExperimentConfig:
    strategy: str = "pfpl"
    alpha: float = 0.5
    lam: float = 1.0
    weight_mode: str = "similarity"
    input_dim: int = 16
    hidden_dims: tuple = (64,)
    embedding_dim: int = 32
    source: str = "synthetic"
    num_classes: int = 6
    num_domains: int = 2
    samples_per_class: int = 400
    noise_std: float = 0.65
    class_separation: float = 3.0
    csv_paths: tuple = ()
    idx_paths: tuple = ()  # (images, labels) pairs
    num_clients: int = 8
    n_choices: tuple = (3,)
    k_choices: tuple = (50,)
    domains_per_client: int = 1
    test_fraction: float = 0.2
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-5
    batch_size: int = 4
    rounds: int = 30
    local_epochs: int = 1
    seed: int = 0


def _parse_int(text: str) -> int:
    return int(str(text).strip())


def _parse_float(text: str) -> float:
    return float(str(text).strip())


def _parse_choice(options):
    def parse(text: str) -> str:
        value = str(text).strip()
        if value not in options:
            raise ValueError(f"must be one of {', '.join(options)}, got {value!r}")
        return value

    return parse


def _parse_int_set(text: str) -> tuple:
    """Comma set ("3,4,5") or inclusive range ("40:60")."""
    text = str(text).strip()
    if ":" in text:
        lo, hi = text.split(":", 1)
        lo, hi = int(lo), int(hi)
        if hi < lo:
            raise ValueError(f"range {text!r} is empty")
        return tuple(range(lo, hi + 1))
    return tuple(int(part) for part in text.split(",") if part.strip() != "")


def _parse_paths(text: str) -> tuple:
    return tuple(part.strip() for part in str(text).split(",") if part.strip())


def _parse_idx_pairs(text: str) -> tuple:
    pairs = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        if ":" not in part:
            raise ValueError(f"expected images:labels pair, got {part!r}")
        images, labels = part.split(":", 1)
        pairs.append((images.strip(), labels.strip()))
    return tuple(pairs)


def _format_int_set(values: tuple) -> str:
    return ",".join(str(v) for v in values)


def _format_idx_pairs(pairs: tuple) -> str:
    return ",".join(f"{img}:{lab}" for img, lab in pairs)


# dotted key -> (attribute, parser, formatter)
KEYS = {
    "strategy": ("strategy", _parse_choice(STRATEGIES), str),
    "alpha": ("alpha", _parse_float, float),
    "lambda": ("lam", _parse_float, float),
    "weight_mode": ("weight_mode", _parse_choice(WEIGHT_MODES), str),
    "model.input_dim": ("input_dim", _parse_int, int),
    "model.hidden_dims": ("hidden_dims", _parse_int_set, _format_int_set),
    "model.embedding_dim": ("embedding_dim", _parse_int, int),
    "data.source": ("source", _parse_choice(SOURCES), str),
    "data.num_classes": ("num_classes", _parse_int, int),
    "data.num_domains": ("num_domains", _parse_int, int),
    "data.samples_per_class": ("samples_per_class", _parse_int, int),
    "data.noise_std": ("noise_std", _parse_float, float),
    "data.class_separation": ("class_separation", _parse_float, float),
    "data.csv": ("csv_paths", _parse_paths, ",".join),
    "data.idx": ("idx_paths", _parse_idx_pairs, _format_idx_pairs),
    "partition.num_clients": ("num_clients", _parse_int, int),
    "partition.n": ("n_choices", _parse_int_set, _format_int_set),
    "partition.k": ("k_choices", _parse_int_set, _format_int_set),
    "partition.domains_per_client": ("domains_per_client", _parse_int, int),
    "partition.test_fraction": ("test_fraction", _parse_float, float),
    "optimizer.eta": ("lr", _parse_float, float),
    "optimizer.momentum": ("momentum", _parse_float, float),
    "optimizer.weight_decay": ("weight_decay", _parse_float, float),
    "optimizer.batch_size": ("batch_size", _parse_int, int),
    "rounds": ("rounds", _parse_int, int),
    "local_epochs": ("local_epochs", _parse_int, int),
    "seed": ("seed", _parse_int, int),
}

SWEEPABLE = {
    "alpha": "alpha",
    "lambda": "lambda",
    "strategy": "strategy",
    "n": "partition.n",
    "k": "partition.k",
    "weight_mode": "weight_mode",
    "seed": "seed",
}


def read_config_file(path) -> dict:
    """Flat key -> raw value mapping from a key=value document or flat JSON."""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    text = path.read_text()
    if path.suffix == ".json":
        try:
            data = json.loads(text) if text.strip() else {}
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigurationError(f"{path}: expected a JSON object of config keys")
        return {str(k): v for k, v in data.items()}

    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def parse_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Defaults, then the file at ``path``, then ``overrides``, then validate."""
    config = ExperimentConfig()
    for layer in (read_config_file(path) if path else {}, overrides or {}):
        for key, raw in layer.items():
            if key not in KEYS:
                raise ConfigurationError(f"unknown config key: {key}")
            attr, parser, _ = KEYS[key]
            try:
                setattr(config, attr, parser(str(raw)))
            except (ValueError, TypeError) as exc:
                raise ConfigurationError(f"{key}: {exc}") from exc
    validate_config(config)
    return config


def validate_config(config: ExperimentConfig) -> None:
    def fail(key, message):
        raise ConfigurationError(f"{key}: {message}")

    if config.strategy not in STRATEGIES:
        fail("strategy", f"must be one of {STRATEGIES}")
    if not 0.0 <= config.alpha <= 1.0:
        fail("alpha", f"must be in [0, 1], got {config.alpha}")
    if config.lam < 0:
        fail("lambda", f"must be >= 0, got {config.lam}")
    if config.weight_mode not in WEIGHT_MODES:
        fail("weight_mode", f"must be one of {WEIGHT_MODES}")
    if config.input_dim < 2:
        fail("model.input_dim", f"must be >= 2, got {config.input_dim}")
    if not config.hidden_dims or any(h < 1 for h in config.hidden_dims):
        fail("model.hidden_dims", f"must be positive, got {config.hidden_dims}")
    if config.embedding_dim < 1:
        fail("model.embedding_dim", f"must be >= 1, got {config.embedding_dim}")
    if config.source not in SOURCES:
        fail("data.source", f"must be one of {SOURCES}")
    if config.source == "synthetic":
        if config.num_classes < 2:
            fail("data.num_classes", f"must be >= 2, got {config.num_classes}")
        if not 1 <= config.num_domains <= config.num_classes:
            fail(
                "data.num_domains",
                f"must be in [1, data.num_classes], got {config.num_domains}",
            )
        if config.samples_per_class < 1:
            fail("data.samples_per_class", "must be >= 1")
        if config.noise_std < 0:
            fail("data.noise_std", "must be >= 0")
        if config.class_separation <= 0:
            fail("data.class_separation", "must be > 0")
    if config.source == "csv" and not config.csv_paths:
        fail("data.csv", "csv source needs at least one path")
    if config.source == "idx" and not config.idx_paths:
        fail("data.idx", "idx source needs at least one images:labels pair")
    if config.num_clients < 1:
        fail("partition.num_clients", "must be >= 1")
    if not config.n_choices or any(n < 1 for n in config.n_choices):
        fail("partition.n", f"must be positive, got {config.n_choices}")
    if not config.k_choices or any(k < 1 for k in config.k_choices):
        fail("partition.k", f"must be positive, got {config.k_choices}")
    if config.domains_per_client < 1:
        fail("partition.domains_per_client", "must be >= 1")
    if not 0.0 <= config.test_fraction < 1.0:
        fail("partition.test_fraction", f"must be in [0, 1), got {config.test_fraction}")
    if config.lr <= 0:
        fail("optimizer.eta", f"must be > 0, got {config.lr}")
    if not 0.0 <= config.momentum < 1.0:
        fail("optimizer.momentum", f"must be in [0, 1), got {config.momentum}")
    if config.weight_decay < 0:
        fail("optimizer.weight_decay", "must be >= 0")
    if config.batch_size < 1:
        fail("optimizer.batch_size", "must be >= 1")
    if config.rounds < 0:
        fail("rounds", "must be >= 0")
    if config.local_epochs < 1:
        fail("local_epochs", "must be >= 1")
    if config.seed < 0:
        fail("seed", "must be >= 0")


def config_to_flat(config: ExperimentConfig) -> dict:
    flat = {}
    for key, (attr, _, formatter) in KEYS.items():
        flat[key] = formatter(getattr(config, attr))
    return flat


def write_resolved_config(path, config: ExperimentConfig) -> None:
    Path(path).write_text(json.dumps(config_to_flat(config), indent=2, sort_keys=True) + "\n")


def build_pools(config: ExperimentConfig) -> dict:
    """Per-domain LabeledData pools for the configured source."""
    if config.source == "synthetic":
        specs = default_domain_specs(config.num_domains, config.num_classes, config.noise_std)
        return {
            spec.domain_id: make_synthetic_domain(
                spec,
                config.num_classes,
                base_seed=derive_seed(config.seed, "data"),
                samples_per_class=config.samples_per_class,
                dim=config.input_dim,
                radius=config.class_separation,
            )
            for spec in specs
        }
    if config.source == "csv":
        pools = {}
        for domain_id, path in enumerate(config.csv_paths):
            data = load_csv(path)
            data.domain[:] = domain_id
            pools[domain_id] = data
        return pools
    pools = {}
    for domain_id, (images, labels) in enumerate(config.idx_paths):
        data = load_idx(images, labels)
        data.domain[:] = domain_id
        pools[domain_id] = data
    return pools


def make_partition_plan(config: ExperimentConfig, pools: dict) -> PartitionPlan:
    """Stochastic but balanced domain assignment, then the configured n/k draws."""
    domains = sorted(pools)
    if config.domains_per_client > len(domains):
        raise ConfigurationError(
            f"partition.domains_per_client: wants {config.domains_per_client} domains, "
            f"only {len(domains)} available"
        )
    rng = substream(config.seed, "domain-assignment")
    if config.domains_per_client == 1:
        # stochastic but balanced: deal from repeated shuffles of the domain list
        deck = []
        while len(deck) < config.num_clients:
            deck.extend(rng.permutation(domains).tolist())
        assignment = {cid: (int(deck[cid]),) for cid in range(config.num_clients)}
    else:
        assignment = {
            cid: tuple(
                int(d)
                for d in rng.choice(domains, size=config.domains_per_client, replace=False)
            )
            for cid in range(config.num_clients)
        }
    return PartitionPlan(
        num_clients=config.num_clients,
        n_choices=tuple(config.n_choices),
        k_choices=tuple(config.k_choices),
        domain_assignment=assignment,
        seed=derive_seed(config.seed, "partition"),
        test_fraction=config.test_fraction,
    )

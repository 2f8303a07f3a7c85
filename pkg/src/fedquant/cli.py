"""Command-line experiment runner.

    fedquant run  [--config FILE] [--clients 5 --rounds 15 ...] --out DIR
    fedquant bits [--architecture mnist_cnn] [--bitwidths 4-2-2-4 ...] [--strategy fedavg]
    fedquant hist CHECKPOINT --layer 0 --bins 50 [--out FILE]

Config files hold ``key = value`` lines; ``#`` starts a comment.  Flags
override file values.  Failures exit nonzero with one ``error:`` line on
stderr.
"""

import argparse
import hashlib
import logging
import os
import sys
from dataclasses import dataclass, fields

import numpy as np

from . import codec
from .codec import Strategy
from .data import load_cifar10, load_mnist, synthetic_dataset
from .errors import ConfigError, FedQuantError
from .federation import FederationConfig, metrics_csv, run_federation
from .nn import QUANTIZABLE, Architecture, SgdConfig, weight_histogram
from .quant import Mode, ThresholdMode

log = logging.getLogger("fedquant")

DATA_DIR_ENV = "FEDQUANT_DATA_DIR"
# Published communication-savings rows for the MNIST model: label, the bit
# widths its own bit-count expression uses, and the printed ratio.  The
# "4-2-2-4" row's expression charges conv2 at 4 bits.
REFERENCE_ROWS = (
    ("4-4-4-4", (4, 4, 4, 4), 8.0),
    ("4-2-2-4", (4, 4, 2, 4), 15.53),
    ("2-2-2-2", (2, 2, 2, 2), 15.98),
    ("2-1-1-2", (2, 1, 1, 2), 31.12),
)
REFERENCE_TOTAL = 80848

_BOOL = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


@dataclass
class ExperimentConfig:
    dataset: str = "mnist"
    data_dir: str = ""
    architecture: str = ""
    clients: int = 30
    rounds: int = 100
    client_fraction: float = 1.0
    local_epochs: int = 1
    bitwidths: str = "4-2-2-4"
    mode: str = "stoch"
    threshold: str = "octav"
    strategy: str = "fedavg"
    full_precision: bool = False
    trials: int = 1
    seed: int = 0
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 64
    train_limit: int = 0
    test_limit: int = 0
    synthetic_samples: int = 2000
    qat: str = "ste"
    workers: int = 1
    output_dir: str = "results"

    def resolved_text(self):
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    def config_hash(self):
        return hashlib.sha256(self.resolved_text().encode()).hexdigest()[:16]

    def federation_config(self, seed):
        return FederationConfig(
            architecture=self.architecture,
            clients=self.clients,
            rounds=self.rounds,
            client_fraction=self.client_fraction,
            local_epochs=self.local_epochs,
            bitwidths=self.bitwidths,
            mode=self.mode,
            threshold=self.threshold,
            strategy=self.strategy,
            full_precision=self.full_precision,
            sgd=SgdConfig(self.lr, self.momentum, self.weight_decay, self.batch_size),
            seed=seed,
            qat=self.qat,
            workers=self.workers,
        )


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}
_CHOICES = {
    "dataset": ("mnist", "cifar10", "synthetic"),
    "mode": tuple(m.value for m in Mode),
    "threshold": tuple(t.value for t in ThresholdMode),
    "strategy": tuple(s.value for s in Strategy),
    "qat": ("projection", "ste"),
    "architecture": ("", *(a.value for a in Architecture)),
}
_DEFAULT_ARCH = {"mnist": "mnist_cnn", "cifar10": "cifar_cnn", "synthetic": "mnist_cnn"}


def _coerce(key, text):
    kind = _FIELDS[key].type
    text = str(text).strip()
    try:
        if kind in (bool, "bool"):
            return _BOOL[text.lower()]
        if kind in (int, "int"):
            return int(text)
        if kind in (float, "float"):
            return float(text)
    except (KeyError, ValueError):
        raise ConfigError(key, f"cannot parse {text!r}") from None
    return text


def read_config_file(path):
    values = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}", f"expected 'key = value' in {path}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in _FIELDS:
                raise ConfigError(key, "unknown key")
            values[key] = value
    return values


def parse_config(path=None, overrides=None) -> ExperimentConfig:
    """Merge a ``key = value`` file with flag overrides and validate."""
    raw = read_config_file(path) if path else {}
    for key, value in (overrides or {}).items():
        if key not in _FIELDS:
            raise ConfigError(key, "unknown key")
        if value is not None:
            raw[key] = value
    cfg = ExperimentConfig(**{k: _coerce(k, v) for k, v in raw.items()})
    for key, allowed in _CHOICES.items():
        if getattr(cfg, key) not in allowed:
            raise ConfigError(key, f"must be one of {', '.join(a for a in allowed if a)}")
    if not cfg.architecture:
        cfg.architecture = _DEFAULT_ARCH[cfg.dataset]
    if not cfg.data_dir:
        cfg.data_dir = os.environ.get(DATA_DIR_ENV, "")
    try:
        bits = codec.parse_bitwidths(cfg.bitwidths)
    except ValueError as exc:
        raise ConfigError("bitwidths", str(exc)) from None
    cfg.bitwidths = "-".join(map(str, bits))
    for key in ("trials", "batch_size"):
        if getattr(cfg, key) < 1:
            raise ConfigError(key, "must be >= 1")
    for key in ("train_limit", "test_limit"):
        if getattr(cfg, key) < 0:
            raise ConfigError(key, "must be >= 0")
    try:
        SgdConfig(cfg.lr, cfg.momentum, cfg.weight_decay, cfg.batch_size)
    except ValueError as exc:
        key = str(exc).split()[0]
        raise ConfigError(key, str(exc)) from None
    cfg.federation_config(cfg.seed)  # range checks owned by the federation layer
    return cfg


def load_datasets(cfg: ExperimentConfig):
    if cfg.dataset == "synthetic":
        shape = (1, 28, 28) if cfg.architecture == "mnist_cnn" else (3, 32, 32)
        n = cfg.synthetic_samples
        blobs = synthetic_dataset(n + n // 2, 10, shape, seed=cfg.seed)
        return blobs.subset(np.arange(n)), blobs.subset(np.arange(n, n + n // 2))
    if not cfg.data_dir:
        raise ConfigError("data_dir", f"required for {cfg.dataset} (or set {DATA_DIR_ENV})")
    if cfg.dataset == "mnist":
        train, test = load_mnist(cfg.data_dir)
    else:
        train, test = load_cifar10(cfg.data_dir)
    if cfg.train_limit:
        train = train.head(cfg.train_limit)
    if cfg.test_limit:
        test = test.head(cfg.test_limit)
    return train, test


def summary_csv(per_trial, comment):
    rounds = {len(m) for m in per_trial}
    if len(rounds) > 1:
        raise ValueError("trials have differing round counts")
    lines = [f"# {comment}",
             "round,strategy,config,train_acc_mean,train_acc_std,test_acc_mean,test_acc_std,uplink_bits"]
    for rows in zip(*per_trial):
        train = np.array([r.train_accuracy for r in rows])
        test = np.array([r.test_accuracy for r in rows])
        r0 = rows[0]
        lines.append(f"{r0.round},{r0.strategy},{r0.config},{train.mean():.6f},{train.std():.6f},"
                     f"{test.mean():.6f},{test.std():.6f},{r0.uplink_bits}")
    return "\n".join(lines) + "\n"


def cmd_run(cfg: ExperimentConfig, out=None):
    """Run ``cfg.trials`` seeds and write per-trial and summary CSVs."""
    out = out or sys.stdout
    from .codec import save_checkpoint

    train, test = load_datasets(cfg)
    os.makedirs(cfg.output_dir, exist_ok=True)
    comment = f"config_hash={cfg.config_hash()}"
    with open(os.path.join(cfg.output_dir, "config.txt"), "w") as f:
        f.write(cfg.resolved_text())
    per_trial, written = [], []
    for trial in range(cfg.trials):
        fed = cfg.federation_config(cfg.seed + trial)
        result = run_federation(fed, train, test)
        per_trial.append(result.metrics)
        path = os.path.join(cfg.output_dir, f"trial_{trial}.csv")
        with open(path, "w") as f:
            f.write(metrics_csv(result.metrics, comment))
        save_checkpoint(os.path.join(cfg.output_dir, f"trial_{trial}_model.ckpt"), result.model)
        written.append(path)
    path = os.path.join(cfg.output_dir, "summary.csv")
    with open(path, "w") as f:
        f.write(summary_csv(per_trial, comment))
    written.append(path)
    for p in written:
        print(p, file=out)
    return written


def _hash_line(text):
    return f"# config_hash={hashlib.sha256(text.encode()).hexdigest()[:16]}"


def bits_report(architecture="mnist_cnn", configs=None, strategy="fedavg"):
    """Rows of the communication-savings table plus ``# note:`` footnotes.

    With no ``configs`` the published MNIST rows are audited: each row's bit
    count is recomputed from the widths in its own expression and compared
    with the printed ratio.  Explicit configs that match a published label
    are footnoted the same way.
    """
    strategy = Strategy(strategy)
    architecture = Architecture(architecture)
    reference = {label: (widths, printed) for label, widths, printed in REFERENCE_ROWS}
    mnist = architecture is Architecture.MNIST_CNN
    if configs:
        entries = []
        for text in configs:
            bits = tuple(codec.parse_bitwidths(text))
            label = "-".join(map(str, bits))
            widths, printed = reference.get(label, (bits, None)) if mnist else (bits, None)
            entries.append((label, bits, printed if widths == bits else None))
    else:
        architecture, mnist = Architecture.MNIST_CNN, True
        entries = REFERENCE_ROWS
    header = "config,bitwidths,strategy,quantized_bits,full_precision_bits,savings_ratio,printed_ratio,wire_bytes"
    rows, notes = [header], []
    for label, bits, printed in entries:
        widths = "-".join(map(str, bits))
        budget = codec.bit_budget(architecture, bits, strategy)
        wire = codec.payload_size(architecture, bits, strategy)
        shown = "" if printed is None else f"{printed:.2f}"
        rows.append(f"{label},{widths},{strategy.value},{budget.quantized_bits},"
                    f"{budget.full_precision_bits},{budget.savings_ratio:.4f},{shown},{wire}")
        if printed is not None and abs(budget.savings_ratio - printed) > 0.01:
            notes.append(f"# note: {label} is printed as {printed:.2f}; its row expression gives "
                         f"{budget.savings_ratio:.2f}")
        ref = reference.get(label) if mnist else None
        if ref and "-".join(map(str, ref[0])) != label:
            if widths == label:
                notes.append(f"# note: the published {label} row expression uses widths "
                             f"{'-'.join(map(str, ref[0]))} and prints {ref[1]:.2f}")
            else:
                literal = codec.bit_budget(architecture, codec.parse_bitwidths(label), strategy)
                notes.append(f"# note: the {label} row expression uses widths {widths}; literal {label} "
                             f"gives {literal.quantized_bits} bits, ratio {literal.savings_ratio:.2f}")
    if mnist:
        total = sum(codec.quantizable_counts(architecture))
        notes.append(f"# note: full-precision total uses {total} weights (row sum); "
                     f"the published total is {REFERENCE_TOTAL}")
    first = _hash_line(f"bits architecture={architecture.value} configs={configs or ''} strategy={strategy.value}")
    return [first] + rows, notes


def cmd_bits(architecture, configs, strategy, out=None):
    out = out or sys.stdout
    rows, notes = bits_report(architecture, configs, strategy)
    out.write("\n".join(rows + notes) + "\n")
    return rows, notes


def cmd_hist(checkpoint, layer, bins, out_path=None, out=None):
    out = out or sys.stdout
    from .codec import load_checkpoint

    if not os.path.exists(checkpoint):
        raise FileNotFoundError(f"checkpoint not found: {checkpoint}")
    model = load_checkpoint(checkpoint)
    edges, counts = weight_histogram(model, layer, bins)
    lines = [_hash_line(f"hist checkpoint={os.path.abspath(checkpoint)} layer={layer} bins={bins}"),
             f"# layer={QUANTIZABLE[layer]}", "bin_lo,bin_hi,count"]
    lines += [f"{lo:.9g},{hi:.9g},{c}" for lo, hi, c in zip(edges[:-1], edges[1:], counts)]
    text = "\n".join(lines) + "\n"
    if out_path:
        with open(out_path, "w") as f:
            f.write(text)
    else:
        out.write(text)
    return edges, counts


def build_parser():
    parser = argparse.ArgumentParser(prog="fedquant", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run federated experiments")
    run.add_argument("--config", help="key = value config file")
    for name, f in _FIELDS.items():
        if name == "output_dir":
            continue
        run.add_argument("--" + name.replace("_", "-"), dest=name, default=None)
    run.add_argument("--out", dest="output_dir", default=None)

    bits = sub.add_parser("bits", help="uplink bit budget table")
    bits.add_argument("--architecture", default="mnist_cnn")
    bits.add_argument("--bitwidths", nargs="*", default=None,
                      help="configs to tabulate; default audits the published MNIST rows")
    bits.add_argument("--strategy", default="fedavg", choices=[s.value for s in Strategy])

    hist = sub.add_parser("hist", help="weight histogram of a saved global model")
    hist.add_argument("checkpoint")
    hist.add_argument("--layer", type=int, default=0)
    hist.add_argument("--bins", type=int, default=50)
    hist.add_argument("--out", default=None)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            overrides = {k: getattr(args, k) for k in _FIELDS}
            cmd_run(parse_config(args.config, overrides))
        elif args.command == "bits":
            cmd_bits(args.architecture, args.bitwidths, args.strategy)
        else:
            cmd_hist(args.checkpoint, args.layer, args.bins, args.out)
    except ConfigError as exc:
        print(f"error: ConfigError key={exc.key}: {str(exc).split(': ', 1)[-1]}", file=sys.stderr)
        return 2
    except (FedQuantError, OSError, ValueError, IndexError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

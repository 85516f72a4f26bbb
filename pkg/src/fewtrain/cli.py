"""Experiment harness: dataset generation, training over seeds x splits,
evaluation, aggregation, and the storage report.

Subcommands: gen-data, split, train, eval, report, storage-report.
Exit codes: 0 success, 2 configuration/input error, 1 internal failure.
Set FEWTRAIN_OUTPUT_ROOT to relocate every output directory.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import data as dt
from .adapter import AdapterConfig, InsertionPoint
from .checkpoint import load_checkpoint, read_header, save_checkpoint
from .encoder import EncoderConfig, count_params, init_encoder
from .errors import CheckpointError, ConfigError, FewtrainError, InputError
from .prompting import PromptModel, PromptTemplate, Verbalizer, apply_template
from .reweight import ReweightConfig
from .selftrain import (MODES, LabeledSet, SelfTrainConfig, TrainData, run)

CONFIG_VERSION = 1
METRICS_VERSION = 1
ENCODER_SEED_TAG = 0x0E
BYTES_PER_PARAM = 8  # 64-bit floats throughout


# ---------------------------------------------------------------------------
# experiment configuration


@dataclass(frozen=True)
class DataConfig:
    spec: dt.SyntheticTaskSpec
    seed: int = 42


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = "list"
    output_dir: str = "runs"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    template: str = "{S1} it was {MASK}"
    verbalizer: dict = field(default_factory=lambda: {"neg": "LBL0",
                                                      "pos": "LBL1"})
    selftrain: SelfTrainConfig = field(default_factory=SelfTrainConfig)
    reweight: ReweightConfig | None = None
    fewshot: dt.FewShotSpec = field(default_factory=dt.FewShotSpec)
    run_seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    data: DataConfig = field(default_factory=lambda: DataConfig(
        spec=dt.default_task_spec(noise=0.4)))

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.mode == "list" and self.selftrain.warmup_steps < 1:
            raise ConfigError("list mode requires warmup_steps > 0")
        object.__setattr__(self, "run_seeds", tuple(self.run_seeds))
        if not self.run_seeds:
            raise ConfigError("need at least one run seed")
        PromptTemplate.from_string(self.template)
        if len(self.verbalizer) != self.data.spec.n_labels:
            raise ConfigError("verbalizer size must match the task's labels")

    def effective_selftrain(self, seed: int) -> SelfTrainConfig:
        cfg = replace(self.selftrain, seed=seed, reweight=self.reweight)
        if self.mode == "promptst":  # plain self-training: no warmup phase
            cfg = replace(cfg, warmup_steps=0)
        return cfg

    def to_dict(self) -> dict:
        placements = self.adapter.placements
        return {
            "format_version": CONFIG_VERSION,
            "mode": self.mode,
            "output_dir": self.output_dir,
            "encoder": asdict(self.encoder),
            "adapter": {
                "bottleneck_dim": self.adapter.bottleneck_dim,
                "init_noise": self.adapter.init_noise,
                "noise_is_std": self.adapter.noise_is_std,
                "placements": None if placements is None
                else [p.label() for p in placements],
            },
            "template": self.template,
            "verbalizer": dict(self.verbalizer),
            "selftrain": {k: v for k, v in asdict(self.selftrain).items()
                          if k not in ("seed", "reweight")},
            "reweight": None if self.reweight is None else asdict(self.reweight),
            "fewshot": asdict(self.fewshot),
            "run_seeds": list(self.run_seeds),
            "data": {"seed": self.data.seed, "spec": _spec_to_dict(self.data.spec)},
        }

    @staticmethod
    def from_dict(raw: dict) -> "ExperimentConfig":
        version = raw.get("format_version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config format_version {version}")
        adapter_raw = dict(raw.get("adapter", {}))
        placements = adapter_raw.pop("placements", None)
        if placements is not None:
            placements = tuple(InsertionPoint.parse(s) for s in placements)
        reweight_raw = raw.get("reweight")
        return ExperimentConfig(
            mode=raw.get("mode", "list"),
            output_dir=raw.get("output_dir", "runs"),
            encoder=EncoderConfig(**raw.get("encoder", {})),
            adapter=AdapterConfig(placements=placements, **adapter_raw),
            template=raw.get("template", "{S1} it was {MASK}"),
            verbalizer=dict(raw.get("verbalizer",
                                    {"neg": "LBL0", "pos": "LBL1"})),
            selftrain=SelfTrainConfig(**raw.get("selftrain", {})),
            reweight=None if reweight_raw is None
            else ReweightConfig(**reweight_raw),
            fewshot=dt.FewShotSpec(**raw.get("fewshot", {})),
            run_seeds=tuple(raw.get("run_seeds", (1, 2, 3, 4, 5))),
            data=_data_config_from(raw.get("data", {})),
        )


def _spec_to_dict(spec: dt.SyntheticTaskSpec) -> dict:
    return {
        "class_pools": [list(p) for p in spec.class_pools],
        "confuser_pool": list(spec.confuser_pool),
        "noise": spec.noise,
        "seq_len": list(spec.seq_len),
        "train_pool": spec.train_pool,
        "test_size": spec.test_size,
        "extra_tokens": list(spec.extra_tokens),
    }


def _spec_from_dict(raw: dict) -> dt.SyntheticTaskSpec:
    if not raw:
        return dt.default_task_spec(noise=0.4)
    raw = dict(raw)
    raw["class_pools"] = tuple(tuple(p) for p in raw["class_pools"])
    raw["confuser_pool"] = tuple(raw["confuser_pool"])
    raw["seq_len"] = tuple(raw.get("seq_len", (6, 12)))
    raw["extra_tokens"] = tuple(raw.get("extra_tokens", ("it", "was")))
    return dt.SyntheticTaskSpec(**raw)


def _data_config_from(raw: dict) -> DataConfig:
    return DataConfig(spec=_spec_from_dict(raw.get("spec", {})),
                      seed=raw.get("seed", 42))


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise InputError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from None
    return ExperimentConfig.from_dict(raw)


def dump_config(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"


def output_root(cfg_dir: str) -> Path:
    root = os.environ.get("FEWTRAIN_OUTPUT_ROOT")
    return Path(root) / cfg_dir if root else Path(cfg_dir)


# ---------------------------------------------------------------------------
# dataset assembly


def build_task_objects(cfg: ExperimentConfig):
    vocab = dt.build_vocab(cfg.data.spec)
    if len(vocab) > cfg.encoder.vocab_size:
        raise ConfigError(f"vocabulary ({len(vocab)}) exceeds encoder "
                          f"vocab_size ({cfg.encoder.vocab_size})")
    template = PromptTemplate.from_string(cfg.template)
    verbalizer = Verbalizer.from_mapping(cfg.verbalizer, vocab)
    return vocab, template, verbalizer


def make_train_data(cfg: ExperimentConfig, corpus: dt.Corpus,
                    split: dt.Split, vocab, template) -> TrainData:
    max_len = cfg.encoder.max_len

    def render(examples, with_gold):
        out = []
        for ex in examples:
            gold = ex.label if with_gold else None
            out.append(apply_template(template, ex.tokens, None, vocab,
                                      max_len, gold=gold))
        return out

    return TrainData(
        labeled=LabeledSet(render(split.labeled[cfg.fewshot.k], True)),
        unlabeled=render(split.unlabeled, False),
        test=render(split.test, True))


def encoder_seed(run_seed: int) -> list[int]:
    return [run_seed, ENCODER_SEED_TAG]


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    raw = json.loads(Path(args.spec).read_text())
    spec = _spec_from_dict(raw.get("task", raw.get("spec", {})))
    fewshot = dt.FewShotSpec(**raw.get("fewshot", {}))
    out = output_root(args.out)
    out.mkdir(parents=True, exist_ok=True)

    corpus = dt.generate(spec, seed=args.seed)
    splits = dt.make_splits(corpus, fewshot)
    dt.write_corpus(corpus, out / dt.CORPUS_FILE)
    dt.build_vocab(spec).save(out / dt.VOCAB_FILE)
    dt.write_manifest(splits, corpus, out / dt.MANIFEST_FILE)
    (out / dt.DESCRIPTOR_FILE).write_text(json.dumps({
        "format_versions": dt.FORMAT_VERSIONS,
        "seed": args.seed,
        "task": _spec_to_dict(spec),
        "fewshot": asdict(fewshot),
    }, indent=2, sort_keys=True) + "\n")
    print(f"wrote {corpus.spec.train_pool + corpus.spec.test_size} records "
          f"to {out}")
    return 0


def cmd_split(args) -> int:
    data_dir = Path(args.data)
    descriptor = json.loads((data_dir / dt.DESCRIPTOR_FILE).read_text())
    spec = _spec_from_dict(descriptor["task"])
    if args.spec:
        raw = json.loads(Path(args.spec).read_text())
        fewshot = dt.FewShotSpec(**raw.get("fewshot", raw))
    else:
        fewshot = dt.FewShotSpec(**descriptor["fewshot"])
    records = dt.read_corpus_records(data_dir / dt.CORPUS_FILE)
    corpus = dt.Corpus(spec=spec, seed=descriptor["seed"], records=records)
    splits = dt.make_splits(corpus, fewshot)
    dt.write_manifest(splits, corpus, data_dir / dt.MANIFEST_FILE)
    print(f"wrote manifest for splits {list(fewshot.split_ids)} to {data_dir}")
    return 0


def run_dir_name(mode: str, k: int, split_id: int, seed: int) -> str:
    return f"{mode}_k{k}/split{split_id}_seed{seed}"


def train_one(cfg: ExperimentConfig, corpus, split_id: int, seed: int,
              vocab, template, verbalizer):
    split = dt.make_split(corpus, cfg.fewshot, split_id)
    data = make_train_data(cfg, corpus, split, vocab, template)
    enc_params = init_encoder(cfg.encoder, seed=encoder_seed(seed))
    result = run(cfg.mode, enc_params, cfg.adapter,
                 cfg.effective_selftrain(seed), data, verbalizer,
                 pad_id=vocab.pad_id)
    return result, enc_params


def write_metrics(path: Path, cfg: ExperimentConfig, split_id: int,
                  seed: int, result) -> None:
    lines = []
    for record in result.records:
        row = {"format_version": METRICS_VERSION, "mode": cfg.mode,
               "k": cfg.fewshot.k, "split": split_id, "seed": seed}
        row.update(record.as_dict())
        lines.append(json.dumps(row, sort_keys=True))
    path.write_text("".join(line + "\n" for line in lines))


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = output_root(cfg.output_dir)
    vocab, template, verbalizer = build_task_objects(cfg)
    corpus = dt.generate(cfg.data.spec, seed=cfg.data.seed)

    for split_id in cfg.fewshot.split_ids:
        for seed in cfg.run_seeds:
            run_dir = out / run_dir_name(cfg.mode, cfg.fewshot.k, split_id,
                                         seed)
            run_dir.mkdir(parents=True, exist_ok=True)
            result, enc_params = train_one(cfg, corpus, split_id, seed,
                                           vocab, template, verbalizer)
            write_metrics(run_dir / "metrics.jsonl", cfg, split_id, seed,
                          result)
            save_checkpoint(run_dir / "teacher.ckpt", result.teacher,
                            enc_params, cfg.adapter, run_seed=seed)
            (run_dir / "config.json").write_text(dump_config(cfg))
            final = result.records[-1].eval_acc
            print(f"{cfg.mode} k={cfg.fewshot.k} split={split_id} "
                  f"seed={seed}: acc={final:.4f}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    header = read_header(args.checkpoint)
    seed = header.get("run_seed")
    if args.seed is not None:
        seed = args.seed
    if seed is None:
        raise InputError("checkpoint carries no run seed; pass --seed")
    vocab, template, verbalizer = build_task_objects(cfg)
    enc_params = init_encoder(cfg.encoder, seed=encoder_seed(seed))
    tunable, _ = load_checkpoint(args.checkpoint, enc_params)
    corpus = dt.generate(cfg.data.spec, seed=cfg.data.seed)
    test = [apply_template(template, r.tokens, None, vocab,
                           cfg.encoder.max_len, gold=r.gold)
            for r in corpus.test_records]
    model = PromptModel(enc_params, tunable, verbalizer, pad_id=vocab.pad_id)
    acc = model.accuracy(test)
    print(json.dumps({"accuracy": acc, "n_test": len(test), "seed": seed},
                     sort_keys=True))
    return 0


def collect_metrics(runs_dir: Path) -> list[dict]:
    rows = []
    for path in sorted(runs_dir.glob("**/metrics.jsonl")):
        for line in path.read_text().splitlines():
            rows.append(json.loads(line))
    return rows


def final_accuracies(rows: list[dict]) -> dict:
    """Accuracy of each run's last session, grouped by (mode, k)."""
    finals: dict[tuple, dict] = {}
    for row in rows:
        key = (row["mode"], row["k"], row["split"], row["seed"])
        held = finals.get(key)
        if held is None or row["session"] > held["session"]:
            finals[key] = row
    grouped: dict[tuple, list[float]] = {}
    for (mode, k, _split, _seed), row in sorted(finals.items()):
        grouped.setdefault((mode, k), []).append(row["eval_acc"])
    return grouped


def cmd_report(args) -> int:
    runs_dir = output_root(args.runs)
    rows = collect_metrics(runs_dir)
    if not rows:
        raise InputError(f"no metrics records under {runs_dir}")
    grouped = final_accuracies(rows)
    summary = {}
    print("mode        k   runs   mean_acc   std(population)")
    for (mode, k), accs in sorted(grouped.items()):
        arr = np.asarray(accs)
        summary[f"{mode}_k{k}"] = {
            "runs": len(accs), "mean": float(arr.mean()),
            "std": float(arr.std()),  # population std
        }
        print(f"{mode:<10} {k:3d} {len(accs):6d}   {arr.mean():8.4f}"
              f"   {arr.std():8.4f}")
    deltas = {}
    ks = {k for (_m, k) in grouped}
    for k in sorted(ks):
        base = grouped.get(("prompt_fn", k))
        full = grouped.get(("list", k))
        if base and full:
            delta = float(np.mean(full) - np.mean(base))
            deltas[f"k{k}"] = delta
            print(f"delta(list - prompt_fn) @ k={k}: {delta:+.4f}")
    report = {"format_version": METRICS_VERSION, "groups": summary,
              "delta_list_minus_prompt_fn": deltas}
    out_path = runs_dir / "report.json"
    out_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"wrote {out_path}")
    return 0


def storage_ratio(model_params: int, task_params: int, tasks: int) -> dict:
    """Full tuning stores the whole model per task; lite tuning stores one
    model plus per-task tunables."""
    full = model_params * tasks * BYTES_PER_PARAM
    lite = (model_params + task_params * tasks) * BYTES_PER_PARAM
    return {"full_bytes": full, "lite_bytes": lite,
            "ratio": full / lite if lite else float("inf")}


def cmd_storage_report(args) -> int:
    if args.tasks < 1:
        raise InputError("--tasks must be >= 1")
    if args.model_params is not None or args.adapter_params is not None:
        if None in (args.model_params, args.adapter_params):
            raise InputError("--model-params and --adapter-params go together")
        model_params, task_params = args.model_params, args.adapter_params
        source = "given"
    else:
        if args.config is None:
            raise InputError("pass --config or --model-params/--adapter-params")
        cfg = load_config(args.config)
        counts = count_params(cfg.encoder, cfg.adapter)
        model_params = counts["encoder"] + counts["head"]
        task_params = counts["adapter"] + counts["head"]
        source = "config"
    out = storage_ratio(model_params, task_params, args.tasks)
    out.update({"model_params": model_params, "per_task_params": task_params,
                "tasks": args.tasks, "params_from": source})
    print(json.dumps(out, indent=2, sort_keys=True))
    if out["ratio"] < 1.0:
        print("note: lite tuning stores MORE than full tuning at this "
              "task count", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fewtrain",
        description="Few-shot prompted self-training experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    p.add_argument("--spec", required=True, help="task spec JSON file")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("split", help="rewrite the few-shot split manifest")
    p.add_argument("--data", required=True, help="gen-data output directory")
    p.add_argument("--spec", help="optional few-shot spec JSON")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="run the configured mode over "
                                     "seeds x splits")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a saved adapter checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seed", type=int, help="override the stored run seed")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="aggregate metrics across runs")
    p.add_argument("--runs", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("storage-report",
                       help="full-tuning vs adapter storage arithmetic")
    p.add_argument("--config", help="config for measured parameter counts")
    p.add_argument("--tasks", type=int, required=True)
    p.add_argument("--model-params", type=int,
                   help="closed-form: full model parameter count")
    p.add_argument("--adapter-params", type=int,
                   help="closed-form: per-task tunable parameter count")
    p.set_defaults(func=cmd_storage_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InputError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except json.JSONDecodeError as e:
        print(f"error: invalid JSON input: {e}", file=sys.stderr)
        return 2
    except FewtrainError as e:
        print(f"internal error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

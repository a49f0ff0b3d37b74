"""Command-line surface: generate / train / eval / inspect-mask.

Exit codes: 0 success, 2 usage (argparse or flag validation), 3 file I/O
(missing or malformed inputs, unwritable outputs, bad checkpoints), 4
numeric or runtime failure (diverged training, capacity limits, remote
endpoints misbehaving).

Configuration can come from a flat key=value file (TOML-style scalars,
'#' comments); explicit flags always win over file values. Model structure
is read from the checkpoint when one is given — only generation-time knobs
(alpha, lambda, sampler steps, seed) may be overridden at sample time.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .attention import build_full_mask, build_step_mask, mask_to_pbm
from .engine import (
    CheckpointError,
    ModelConfig,
    TrainingError,
    init_params,
    load_checkpoint,
    sample,
    save_checkpoint,
    train,
)
from .llm import LLMEndpoint, SchemaError, TransportError
from .metrics import Embedder, aggregate_reports, evaluate_sequences
from .synthetic import SyntheticRecipe, make_synthetic_dataset
from .tensor import ParameterError, ShapeError, TapeError
from .text import recipe_from_json, refine_recipe
from . import __version__

__all__ = ["main", "RunConfig", "parse_config_file", "write_config_file",
           "CommandError", "EXIT_OK", "EXIT_USAGE", "EXIT_IO", "EXIT_RUNTIME"]

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_RUNTIME = 4

_MODEL_FIELDS = {f.name for f in dataclasses.fields(ModelConfig)}
_RUN_FIELDS = {"mask_mode"}


class CommandError(Exception):
    """A failure with a definite exit code and a printable message."""

    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# config file


def parse_config_file(path) -> dict:
    """Flat key = value lines; values are JSON scalars, '#' starts a comment."""
    out: dict = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CommandError(EXIT_IO, f"cannot read config {path}: {exc}") from None
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CommandError(EXIT_USAGE,
                               f"{path}:{n}: expected 'key = value', got {line!r}")
        key, _, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in _MODEL_FIELDS | _RUN_FIELDS:
            raise CommandError(EXIT_USAGE, f"{path}:{n}: unknown config key {key!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            raise CommandError(
                EXIT_USAGE,
                f"{path}:{n}: value for {key!r} is not a TOML/JSON scalar: {raw!r}"
            ) from None
    return out


def write_config_file(path, mapping: dict) -> None:
    lines = [f"{k} = {json.dumps(v)}" for k, v in sorted(mapping.items())]
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass(frozen=True)
class RunConfig:
    """One command's resolved settings: the model plus run-level choices."""

    model: ModelConfig
    mask_mode: str = "paired"

    def __post_init__(self):
        if self.mask_mode not in ("paired", "full"):
            raise CommandError(EXIT_USAGE,
                               f"mask_mode must be paired|full, got {self.mask_mode!r}")

    def to_mapping(self) -> dict:
        out = dict(dataclasses.asdict(self.model))
        out["mask_mode"] = self.mask_mode
        return out

    @classmethod
    def from_mapping(cls, mapping: dict) -> "RunConfig":
        model_kw = {k: v for k, v in mapping.items() if k in _MODEL_FIELDS}
        try:
            model = ModelConfig(**model_kw)
        except ParameterError as exc:
            raise CommandError(EXIT_USAGE, f"bad model config: {exc}") from None
        return cls(model=model, mask_mode=mapping.get("mask_mode", "paired"))

    @classmethod
    def resolve(cls, args, overrides: dict) -> "RunConfig":
        """config file < explicit flags, starting from defaults."""
        mapping: dict = {}
        if getattr(args, "config", None):
            mapping.update(parse_config_file(args.config))
        mapping.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_mapping(mapping)


# ---------------------------------------------------------------------------
# shared helpers


def _load_recipe(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CommandError(EXIT_IO, f"cannot read recipe {path}: {exc}") from None
    try:
        return recipe_from_json(text)
    except SchemaError as exc:
        raise CommandError(EXIT_IO, f"{path}: {exc}") from None


def _agent_endpoint(spec: str) -> LLMEndpoint | None:
    if spec == "off":
        return None
    if spec == "mock":
        return LLMEndpoint(mock=True)
    return LLMEndpoint(url=spec, mock=False)


def _load_run_dir(path) -> tuple[list[np.ndarray], list[str]]:
    """Images + captions of one generated sequence, via its manifest."""
    manifest = Path(path) / "manifest.json"
    try:
        man = json.loads(manifest.read_text())
    except OSError as exc:
        raise CommandError(EXIT_IO, f"missing manifest: {exc}") from None
    except json.JSONDecodeError as exc:
        raise CommandError(EXIT_IO, f"{manifest}: not valid JSON: {exc}") from None
    try:
        files = man["per_step_files"]
        captions = [s["text"] for s in man["recipe"]["steps"]]
    except (KeyError, TypeError) as exc:
        raise CommandError(EXIT_IO, f"{manifest}: missing field {exc}") from None
    images = []
    for name in files:
        try:
            with Image.open(Path(path) / name) as im:
                images.append(np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0)
        except OSError as exc:
            raise CommandError(EXIT_IO, f"cannot read {name}: {exc}") from None
    return images, captions


def _sequence_dirs(root) -> dict[str, Path]:
    """Map name -> run dir. A dir with its own manifest counts as one
    sequence; otherwise every immediate subdir with a manifest is one."""
    root = Path(root)
    if not root.is_dir():
        raise CommandError(EXIT_IO, f"not a directory: {root}")
    if (root / "manifest.json").exists():
        return {".": root}
    runs = {p.name: p for p in sorted(root.iterdir())
            if (p / "manifest.json").exists()}
    if not runs:
        raise CommandError(EXIT_IO, f"no manifest.json under {root}")
    return runs


def _dataset_from_spec(spec: str):
    """'synthetic:seed=0,count=64,max_steps=5' or a directory of run dirs."""
    if spec.startswith("synthetic:") or spec == "synthetic":
        kwargs = {}
        _, _, tail = spec.partition(":")
        for part in filter(None, tail.split(",")):
            key, eq, val = part.partition("=")
            if not eq or key not in ("seed", "count", "max_steps"):
                raise CommandError(
                    EXIT_USAGE,
                    f"bad synthetic dataset option {part!r} "
                    f"(want seed=, count=, max_steps=)")
            try:
                kwargs[key] = int(val)
            except ValueError:
                raise CommandError(EXIT_USAGE,
                                   f"{key} must be an integer, got {val!r}") from None
        return make_synthetic_dataset(**kwargs)
    items = []
    for name, run in _sequence_dirs(spec).items():
        images, _ = _load_run_dir(run)
        man = json.loads((run / "manifest.json").read_text())
        recipe = recipe_from_json(man["recipe"])
        items.append(SyntheticRecipe(recipe=recipe, images=tuple(images)))
    return items


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    recipe = _load_recipe(args.recipe)
    agent = _agent_endpoint(args.agent)
    if agent is not None:
        recipe = refine_recipe(recipe, agent)

    if args.checkpoint:
        try:
            params, cfg = load_checkpoint(args.checkpoint)
        except CheckpointError as exc:
            raise CommandError(EXIT_IO, f"{args.checkpoint}: {exc}") from None
        knobs = {k: v for k, v in (("alpha", args.alpha), ("lam", args.lam),
                                   ("sampler_steps", args.steps),
                                   ("seed", args.seed))
                 if v is not None}
        if knobs:
            cfg = dataclasses.replace(cfg, **knobs)
        run = RunConfig(model=cfg, mask_mode=args.mask_mode or "paired")
    else:
        if not args.untrained:
            raise CommandError(
                EXIT_USAGE,
                "no --checkpoint given; pass --untrained to sample with "
                "random weights on purpose")
        run = RunConfig.resolve(args, {"alpha": args.alpha, "lam": args.lam,
                                       "sampler_steps": args.steps,
                                       "seed": args.seed,
                                       "mask_mode": args.mask_mode})
        params = init_params(run.model)

    result = sample(recipe, run.model, params, out_dir=args.out,
                    seed=args.seed, mask_mode=run.mask_mode)
    print(f"wrote {len(result.images)} step images to {args.out} "
          f"(mask_mode={run.mask_mode}, alpha={run.model.alpha}, "
          f"lambda={run.model.lam})")
    return EXIT_OK


def cmd_train(args) -> int:
    run = RunConfig.resolve(args, {"seed": args.seed})
    out = Path(args.out)
    if not out.parent.exists():
        raise CommandError(EXIT_IO, f"output directory {out.parent} does not exist")
    dataset = _dataset_from_spec(args.dataset)
    params, curve = train(dataset, run.model, steps=args.steps, lr=args.lr,
                          log_every=args.log_every,
                          freeze_noise=args.freeze_noise)
    save_checkpoint(out, params, run.model)
    log_path = out.with_suffix(out.suffix + ".curve.json")
    log_path.write_text(json.dumps(
        [{"step": s, "loss": l, "grad_norm": g} for s, l, g in curve],
        indent=2) + "\n")
    first, last = curve[0][1], curve[-1][1]
    print(f"trained {args.steps} steps on {len(dataset)} recipes: "
          f"loss {first:.4f} -> {last:.4f}; checkpoint {out}, log {log_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    embedder = (Embedder() if args.embedder == "builtin"
                else Embedder(backend=args.embedder))
    llm = None
    if args.llm == "mock":
        llm = LLMEndpoint(mock=True)
    elif args.llm != "off":
        llm = LLMEndpoint(url=args.llm, mock=False)

    gen_runs = _sequence_dirs(args.generated)
    ref_runs = _sequence_dirs(args.reference)
    names = sorted(set(gen_runs) & set(ref_runs))
    if not names:
        raise CommandError(
            EXIT_IO, f"no matching sequence names between {args.generated} "
                     f"and {args.reference}")
    per_recipe, reports = {}, []
    for name in names:
        gen_images, captions = _load_run_dir(gen_runs[name])
        ref_images, _ = _load_run_dir(ref_runs[name])
        report = evaluate_sequences(gen_images, captions, ref_images,
                                    embedder, llm_endpoint=llm)
        per_recipe[name] = report.to_json()
        reports.append(report)
    blob = {"per_recipe": per_recipe, "aggregate": aggregate_reports(reports)}
    text = json.dumps(blob, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
        print(f"wrote metric report for {len(names)} sequences to {args.out}")
    else:
        print(text)
    return EXIT_OK


def _parse_int_list(raw: str, n: int, what: str) -> list[int]:
    try:
        values = [int(x) for x in raw.split(",")]
    except ValueError:
        raise CommandError(EXIT_USAGE,
                           f"{what} must be integers, got {raw!r}") from None
    if len(values) == 1:
        values = values * n
    if len(values) != n:
        raise CommandError(EXIT_USAGE,
                           f"{what}: expected 1 or {n} values, got {len(values)}")
    return values


def cmd_inspect_mask(args) -> int:
    n = args.steps
    if n < 1:
        raise CommandError(EXIT_USAGE, f"--steps must be >= 1, got {n}")
    text_lens = _parse_int_list(args.text_lens, n, "--text-lens")
    region_tokens = _parse_int_list(args.region_tokens, n, "--region-tokens")
    build = build_step_mask if args.mask_mode == "paired" else build_full_mask
    mask = build(text_lens, region_tokens)
    row_sums = mask.token_matrix.sum(axis=1).astype(int)
    if args.json:
        print(json.dumps({
            "n_steps": n,
            "block_matrix": mask.block_matrix.astype(int).tolist(),
            "block_extents": [list(e) for e in mask.block_extents],
            "token_matrix_shape": list(mask.token_matrix.shape),
            "token_row_sums": row_sums.tolist(),
        }, indent=2))
    else:
        print(f"{n} steps, {mask.n_tokens} tokens "
              f"({sum(text_lens)} text + {sum(region_tokens)} latent)")
        print("block matrix (text rows first, then regions):")
        for row in mask.block_matrix.astype(int):
            print("  " + " ".join(str(v) for v in row))
        print(f"token matrix: {mask.token_matrix.shape[0]}x"
              f"{mask.token_matrix.shape[1]}, "
              f"row sums {row_sums.min()}..{row_sums.max()}")
    if args.pbm:
        Path(args.pbm).write_text(mask_to_pbm(mask, which=args.which))
        print(f"wrote {args.which} matrix to {args.pbm}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stepflow",
        description="Step-image sequence generation with regional attention "
                    "control and cross-step conditioning.",
        epilog="exit codes: 0 ok, 2 usage, 3 file I/O, 4 numeric/runtime")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="sample one image per recipe step")
    g.add_argument("recipe", help="recipe JSON file")
    g.add_argument("--checkpoint", help="trained checkpoint (.npz)")
    g.add_argument("--untrained", action="store_true",
                   help="allow sampling with freshly initialized weights")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--alpha", type=float, default=None,
                   help="fusion weight of the whole-recipe pass")
    g.add_argument("--lambda", dest="lam", type=float, default=None,
                   help="contextual conditioning weight")
    g.add_argument("--steps", type=int, default=None, metavar="T",
                   help="number of sampler steps")
    g.add_argument("--mask-mode", choices=("paired", "full"), default=None)
    g.add_argument("--agent", default="off", metavar="off|mock|URL",
                   help="rewrite the recipe through the prompt agent first")
    g.add_argument("--config", help="key=value config file")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train on synthetic or on-disk recipes")
    t.add_argument("--dataset", required=True,
                   metavar="synthetic:seed=S,count=C[,max_steps=M] | DIR")
    t.add_argument("--steps", type=int, default=200)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--log-every", type=int, default=50)
    t.add_argument("--freeze-noise", action="store_true",
                   help="fix one noise draw per item (overfit harness)")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--out", required=True, help="checkpoint path (.npz)")
    t.add_argument("--config", help="key=value config file")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score generated sequences against references")
    e.add_argument("--generated", required=True, help="run dir or dir of run dirs")
    e.add_argument("--reference", required=True, help="run dir or dir of run dirs")
    e.add_argument("--embedder", default="builtin", metavar="builtin|URL")
    e.add_argument("--llm", default="off", metavar="off|mock|URL")
    e.add_argument("--out", help="write the JSON report here instead of stdout")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("inspect-mask", help="print the step-pairing mask")
    m.add_argument("--steps", type=int, required=True, metavar="N")
    m.add_argument("--text-lens", default="4", metavar="L1,L2,...",
                   help="text tokens per step (single value broadcasts)")
    m.add_argument("--region-tokens", default="64", metavar="L1,L2,...",
                   help="latent tokens per region (single value broadcasts)")
    m.add_argument("--mask-mode", choices=("paired", "full"), default="paired")
    m.add_argument("--json", action="store_true", help="machine-readable dump")
    m.add_argument("--pbm", help="also write the matrix as PBM to this path")
    m.add_argument("--which", choices=("token", "block"), default="token",
                   help="which matrix the PBM dump contains")
    m.set_defaults(func=cmd_inspect_mask)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse prints its own message
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ParameterError, ShapeError, TapeError, TrainingError,
            TransportError, SchemaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

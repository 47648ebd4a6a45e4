"""``boxguide`` command-line entry point."""
from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import sys
import tempfile
import traceback
from dataclasses import asdict
from pathlib import Path

import numpy as np

log = logging.getLogger("boxguide")

# dest -> (config section, default); a flag on the command line wins over the
# config file, which wins over the default here
DEFAULTS = {
    "seed": ("global", 0),
    "lexicon": ("parse", None),
    "stack": ("toy_stack", None),
    "ckpt": ("boxnet", None),
    "control": ("generate", "off"),
    "gaussian_convention": ("unique_mask", "paper"),
    "renorm": ("attn_control", False),
    "transpose_self": ("attn_control", False),
    "guidance_scale": ("generate", None),
    "category": ("evalbench", "coco"),
    "detector": ("evalbench", "oracle"),
    "seeds": ("evalbench", 20),
    "hw": ("unique_mask", "64x64"),
    "scenes": ("data", 5000),
}
# outputs and verbosity never change what gets computed
NOT_HASHED = {"out", "report", "trace", "verbose", "export_config", "dump_costs", "config"}


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _common(parser: argparse.ArgumentParser) -> None:
    g = parser.add_argument_group("global options")
    g.add_argument("--config", default=argparse.SUPPRESS, help="INI config file (key = value, one section per module)")
    g.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed")
    g.add_argument("--verbose", action="store_true", default=argparse.SUPPRESS, help="debug logging")
    g.add_argument("--export-config", default=argparse.SUPPRESS, metavar="PATH",
                   help="write the resolved configuration as JSON")


def _control_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--control", choices=("off", "cross", "both"), help="attention control scope")
    p.add_argument("--gaussian-convention", choices=("paper", "standard"),
                   help="per-box field used to resolve overlaps (default: paper)")
    p.add_argument("--renorm", action="store_true", default=None, help="renormalize rows after masking")
    p.add_argument("--transpose-self", action="store_true", default=None,
                   help="apply self-attention masks to rows instead of columns")
    p.add_argument("--guidance-scale", type=float, help="classifier-free guidance scale")
    p.add_argument("--stack", help="toy stack weights (default: bundled)")


def build_parser() -> Parser:
    parser = Parser(prog="boxguide", description="Box-guided attention control for text-to-image diffusion.")
    _common(parser)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=Parser)
    sub.required = True

    p = sub.add_parser("parse", help="extract entity phrases from a prompt")
    p.add_argument("--prompt", required=True)
    p.add_argument("--lexicon", help="lexicon file (category<TAB>word per line)")

    p = sub.add_parser("predict-boxes", help="predict one box per entity from a noised latent")
    p.add_argument("--ckpt", help="BoxNet checkpoint")
    p.add_argument("--prompt", required=True)
    p.add_argument("--latent", required=True, help=".npy latent of shape (4, 16, 16) or (1, 4, 16, 16)")
    p.add_argument("--t", type=int, required=True, help="timestep of the latent")
    p.add_argument("--stack", help="toy stack weights (default: bundled)")

    p = sub.add_parser("masks", help="rasterize unique masks for a set of boxes")
    p.add_argument("--boxes", required=True, help="text file, one 'cx cy w h' per line")
    p.add_argument("--hw", help="mask resolution HxW (default 64x64)")
    p.add_argument("--gaussian-convention", choices=("paper", "standard"))
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("generate", help="sample an image from the toy stack")
    p.add_argument("--prompt", required=True)
    p.add_argument("--ckpt", help="BoxNet checkpoint (required unless --control off)")
    p.add_argument("--out", required=True, help="output PNG")
    p.add_argument("--trace", help="write a per-step trace here")
    _control_flags(p)

    p = sub.add_parser("train-boxnet", help="train BoxNet against the frozen toy denoiser")
    p.add_argument("--data", required=True, help="dataset directory (see make-shapes)")
    p.add_argument("--out", required=True, help="output checkpoint")
    p.add_argument("--steps", type=int, help="total training steps")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--resume", help="continue from a periodic checkpoint")
    p.add_argument("--dump-costs", action="store_true", help="log matching cost matrices")
    p.add_argument("--stack", help="toy stack weights (default: bundled)")

    p = sub.add_parser("make-shapes", help="write a synthetic shapes dataset")
    p.add_argument("--scenes", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-toy", help="retrain the toy autoencoder, text encoder and denoiser")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int)
    p.add_argument("--ae-steps", type=int, default=2000)
    p.add_argument("--unet-steps", type=int, default=8000)

    p = sub.add_parser("bench", help="write a benchmark prompt set")
    p.add_argument("--category", choices=("coco", "noncoco", "toy"))
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="score generations with the minimum object score")
    p.add_argument("--ckpt", help="BoxNet checkpoint (required unless --control off)")
    p.add_argument("--prompts", required=True, help="benchmark file or one prompt per line")
    p.add_argument("--seeds", type=int, help="evaluate seeds 0..n-1")
    p.add_argument("--detector", help="'oracle' or 'external:<cmd>'")
    p.add_argument("--report", required=True)
    _control_flags(p)

    for action in sub.choices.values():
        _common(action)
    return parser


def _coerce(value: str, default, dest: str = ""):
    if dest == "guidance_scale":
        return float(value)
    if isinstance(default, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


def resolve(args: argparse.Namespace) -> dict:
    """Merge flags, config file and defaults into one flat mapping."""
    cfg = configparser.ConfigParser()
    path = getattr(args, "config", None)
    if path:
        if not Path(path).is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        cfg.read(path, encoding="utf-8")
    values = {k: v for k, v in vars(args).items()}
    for dest, (section, default) in DEFAULTS.items():
        if dest not in values and dest != "seed":
            continue
        if values.get(dest) is None:
            if cfg.has_option(section, dest):
                values[dest] = _coerce(cfg.get(section, dest), default, dest)
            elif cfg.has_option(args.command, dest):
                values[dest] = _coerce(cfg.get(args.command, dest), default, dest)
            else:
                values[dest] = default
    if args.command == "train-boxnet":
        from .trainer import TrainConfig

        section = dict(cfg.items("trainer")) if cfg.has_section("trainer") else {}
        flags = {"total_steps": values.pop("steps"), "batch_size": values.pop("batch_size"), "lr": values.pop("lr")}
        section.update({k: v for k, v in flags.items() if v is not None})
        section.setdefault("seed", values["seed"])
        values["train"] = asdict(TrainConfig.from_mapping(section))
    values["verbose"] = bool(values.get("verbose", False))
    return values


def config_hash(values: dict) -> str:
    payload = {k: v for k, v in values.items() if k not in NOT_HASHED}
    return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _load_stack(values):
    from .toy_diffusion.stack import ToyStack

    return ToyStack.load(values.get("stack"))


def _lexicon(values):
    from .prompt_parser import EntityLexicon

    return EntityLexicon.from_file(values["lexicon"]) if values.get("lexicon") else EntityLexicon.default()


def _require_ckpt(values):
    from .boxnet import BoxNetCheckpoint

    if values.get("control", "off") == "off" and values.get("command") != "predict-boxes":
        return BoxNetCheckpoint.load(values["ckpt"]) if values.get("ckpt") else None
    if not values.get("ckpt"):
        raise ValueError("--ckpt is required for this command")
    return BoxNetCheckpoint.load(values["ckpt"])


# -- subcommands ------------------------------------------------------------------

def cmd_parse(values, h):
    from .prompt_parser import WordTokenizer, format_spans, parse_entities

    parsed = parse_entities(values["prompt"], _lexicon(values), WordTokenizer())
    text = format_spans(parsed)
    sys.stdout.write(text if text.endswith("\n") or not text else text + "\n")


def cmd_predict_boxes(values, h):
    import torch

    from .toy_diffusion.pipeline import Generator

    stack = _load_stack(values)
    gen = Generator(stack, _require_ckpt(values))
    z = np.load(values["latent"])
    if z.shape == stack.latent_shape:
        z = z[None]
    if z.shape[1:] != stack.latent_shape or z.shape[0] != 1:
        raise ValueError(f"latent must have shape {stack.latent_shape}, got {z.shape}")
    t = values["t"]
    if not 1 <= t <= stack.scheduler.T:
        raise ValueError(f"--t must be in [1, {stack.scheduler.T}]")
    parsed = gen.parse(values["prompt"])
    if parsed.n_entities == 0:
        raise ValueError("prompt has no entity phrases")
    queries = gen.boxnet.encode_entities(parsed.spans, stack.text_encoder)
    with torch.no_grad():
        boxes = gen.predict_boxes(torch.as_tensor(z, dtype=torch.float32), t,
                                  stack.context([values["prompt"]]), [queries])[0]
    for b in boxes:
        print(b)


def _parse_hw(text: str) -> tuple[int, int]:
    try:
        H, W = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ValueError(f"--hw must look like 64x64, got {text!r}") from None
    if H <= 0 or W <= 0:
        raise ValueError("--hw must be positive")
    return H, W


def read_boxes(path: str | Path):
    from .box import Box

    boxes = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(f"{path}:{n}: expected 'cx cy w h'")
        boxes.append(Box(*(float(v) for v in parts)))
    if not boxes:
        raise ValueError(f"{path}: no boxes")
    return boxes


def cmd_masks(values, h):
    from .unique_mask import dump_text, unique_masks, write_pgm

    hw = _parse_hw(values["hw"])
    ms = unique_masks(read_boxes(values["boxes"]), hw, values["gaussian_convention"])
    out = Path(values["out"])
    out.mkdir(parents=True, exist_ok=True)
    tag = f"{hw[0]}x{hw[1]}"
    for i in range(ms.n):
        write_pgm(ms.masks[i], out / f"mask_{i + 1}_{tag}.pgm", f"config_hash={h}")
    write_pgm(ms.argmax_map * (255 // max(ms.n, 1)), out / f"argmax_{tag}.pgm", f"config_hash={h}")
    (out / f"masks_{tag}.txt").write_text(dump_text(ms, f"config_hash={h}"), encoding="utf-8")
    print(f"wrote {ms.n} masks to {out}")


def _options(values):
    from .toy_diffusion.pipeline import GenerateOptions

    return GenerateOptions(control=values["control"], convention=values["gaussian_convention"],
                           renorm=bool(values["renorm"]), transpose_self=bool(values["transpose_self"]),
                           guidance_scale=values["guidance_scale"])


def save_png(image: np.ndarray, path: str | Path, h: str) -> None:
    from PIL import Image, PngImagePlugin

    info = PngImagePlugin.PngInfo()
    info.add_text("config_hash", h)
    arr = (np.clip(image, 0, 1) * 255 + 0.5).astype(np.uint8)
    Image.fromarray(arr).save(path, pnginfo=info)


def cmd_generate(values, h):
    from .toy_diffusion.pipeline import Generator

    gen = Generator(_load_stack(values), _require_ckpt(values))
    images, trace = gen.generate(values["prompt"], [values["seed"]], _options(values))
    trace.config_hash = h
    save_png(images[0], values["out"], h)
    if values.get("trace"):
        Path(values["trace"]).write_text(trace.to_text(), encoding="utf-8")
    for w in trace.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"wrote {values['out']}")


def cmd_train_boxnet(values, h):
    from .toy_diffusion.shapes import ShapesDataset
    from .trainer import BoxNetTrainer, TrainConfig

    data = Path(values["data"])
    if not (data / "annotations.json").is_file():
        raise FileNotFoundError(f"{data} is not a shapes dataset directory (see make-shapes)")
    stack = _load_stack(values)
    trainer = BoxNetTrainer(stack, ShapesDataset.load(data), TrainConfig(**values["train"]))
    trainer.dump_costs = bool(values.get("dump_costs"))
    if values.get("resume"):
        trainer.load_state(values["resume"])
    before = stack.parameter_checksum()
    out = Path(values["out"])
    run_dir = out.with_name(out.name + ".run")
    meta = {"config_hash": h, "stack_checksum": before}
    ckpt = trainer.train(run_dir, meta)
    if stack.parameter_checksum() != before:
        raise RuntimeError("denoiser parameters changed during BoxNet training")
    ckpt.save(out)
    trainer.write_loss_curve(out.with_name(out.name + ".loss.csv"), h)
    print(f"wrote {out} (loss {ckpt.training_meta['loss_first100']:.4f} -> {ckpt.training_meta['loss_last100']:.4f})")


def cmd_make_shapes(values, h):
    from .toy_diffusion.shapes import ShapesDataset

    ds = ShapesDataset.generate(values["scenes"], values["seed"])
    ds.save(values["out"])
    (Path(values["out"]) / "config_hash.txt").write_text(h + "\n", encoding="utf-8")
    print(f"wrote {len(ds)} scenes to {values['out']}")


def cmd_train_toy(values, h):
    import torch

    from .toy_diffusion.train_toy import train_toy_stack

    stack = train_toy_stack(n_scenes=values["scenes"] or 20000, seed=values["seed"],
                            ae_steps=values["ae_steps"], unet_steps=values["unet_steps"])
    state = stack.state()
    state["config_hash"] = h
    torch.save(state, values["out"])
    print(f"wrote {values['out']}")


def cmd_bench(values, h):
    from .evalbench import format_benchmark, gen_benchmark

    prompts = gen_benchmark(values["category"], values["seed"])
    text = format_benchmark(prompts, values["seed"])
    Path(values["out"]).write_text(f"# config_hash={h}\n" + text, encoding="utf-8")
    print(f"wrote {len(prompts)} prompts to {values['out']}")


def cmd_eval(values, h):
    from .evalbench import evaluate, load_prompts, make_detector
    from .toy_diffusion.pipeline import Generator

    if values["seeds"] <= 0:
        raise ValueError("--seeds must be positive")
    detector = make_detector(values["detector"])
    prompts = load_prompts(values["prompts"])
    if not prompts:
        raise ValueError(f"{values['prompts']}: no prompts")
    gen = Generator(_load_stack(values), _require_ckpt(values))
    options = _options(values)

    def run(text, seeds):
        return gen.generate(text, seeds, options)[0]

    def phrases(text):
        return [f"a {s.head_noun}" for s in gen.parse(text).spans]

    report = evaluate(run, prompts, range(values["seeds"]), detector, f"control={values['control']}", h, phrases)
    Path(values["report"]).write_text(report.to_text(), encoding="utf-8")
    print(f"min object score {report.mean:.4f} +- {report.std:.4f} over {len(report.scores)} samples "
          f"({report.failures} failures)")


COMMANDS = {
    "parse": cmd_parse, "predict-boxes": cmd_predict_boxes, "masks": cmd_masks, "generate": cmd_generate,
    "train-boxnet": cmd_train_boxnet, "make-shapes": cmd_make_shapes, "train-toy": cmd_train_toy,
    "bench": cmd_bench, "eval": cmd_eval,
}


def main(argv: list[str] | None = None) -> int:
    from .attn_control import ControlError
    from .toy_diffusion.stack import MissingWeightsError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        sys.stderr.write(str(e))
        return 1
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    values: dict = {"command": args.command}
    try:
        values = resolve(args)
        h = config_hash(values)
        print(f"config_hash={h}", file=sys.stderr)
        if values.get("export_config"):
            Path(values["export_config"]).write_text(json.dumps({**values, "config_hash": h}, indent=2,
                                                                sort_keys=True, default=str) + "\n")
        COMMANDS[args.command](values, h)
        return 0
    except (ValueError, OSError, MissingWeightsError, ControlError) as e:
        print(f"boxguide {args.command}: error: {e}", file=sys.stderr)
        return 1
    except Exception:  # noqa: BLE001 - top-level crash handler
        fd, path = tempfile.mkstemp(prefix="boxguide-crash-", suffix=".txt")
        with open(fd, "w", encoding="utf-8") as f:
            f.write(traceback.format_exc())
            f.write("\nresolved config:\n" + json.dumps(values, indent=2, sort_keys=True, default=str) + "\n")
        print(f"boxguide {args.command}: internal error; details written to {path}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

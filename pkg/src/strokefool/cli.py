"""Command-line entry points for the whole pipeline.

Every command reads the JSON run config (defaults apply when absent)
plus flag overrides, exits 0 on success, and prints one machine-readable
``error: {...}`` line to stderr otherwise.
"""

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import analysis, store
from .affine import EotConfig
from .attack import AttackConfig, image_rng, run_attack
from .classifier import PreprocessSpec, TinyConvNet, load_model, save_model
from .data import generate_shape_dataset, load_image, load_split, scan_dataset


def _fail(message, **details):
    payload = {"message": message}
    payload.update(details)
    print("error: " + json.dumps(payload, sort_keys=True), file=sys.stderr)
    return 2


def _load_config(args):
    if getattr(args, "config", None):
        cfg = store.load_run_config(args.config)
    else:
        cfg = json.loads(json.dumps(store.DEFAULT_RUN_CONFIG))
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "dataset", None):
        cfg["dataset"]["root"] = args.dataset
    if getattr(args, "out", None):
        cfg["out_dir"] = args.out
    return cfg


def _attack_config(cfg, args):
    ac = store.attack_config_from_run(cfg)
    if getattr(args, "L", None) is not None:
        ac = replace(ac, curves=args.L)
    if getattr(args, "n_itr", None) is not None:
        ac = replace(ac, iterations=args.n_itr)
    if getattr(args, "alpha", None) is not None:
        ac = replace(ac, size_weight=args.alpha)
    if getattr(args, "eot", None) is False:
        ac = replace(ac, eot=EotConfig.identity())
    if getattr(args, "seed", None) is not None:
        ac = replace(ac, seed=args.seed)
    return ac


def _spec(cfg):
    return PreprocessSpec(**cfg["preprocess"])


def _model_path(cfg, args, arch):
    if getattr(args, "model", None):
        return args.model
    return cfg["models"][arch]


def _correctly_classified_pool(cfg, model):
    manifest = scan_dataset(cfg["dataset"]["root"], seed=cfg["seed"],
                            fractions=tuple(cfg["dataset"]["fractions"]))
    images, labels = load_split(manifest, "pool", _spec(cfg))
    keep = model.predict(images) == labels
    refs = [ref for (ref, _), ok in zip(manifest.split_items("pool"), keep) if ok]
    return manifest, images[keep], labels[keep], refs


def cmd_gen_dataset(args):
    cfg = _load_config(args)
    count = generate_shape_dataset(cfg["dataset"]["root"],
                                   per_class=cfg["dataset"]["per_class"],
                                   canvas=cfg["dataset"]["canvas"],
                                   seed=cfg["seed"])
    print(f"wrote {count} images under {cfg['dataset']['root']}")
    return 0


def cmd_train(args):
    cfg = _load_config(args)
    manifest = scan_dataset(cfg["dataset"]["root"], seed=cfg["seed"],
                            fractions=tuple(cfg["dataset"]["fractions"]))
    spec = _spec(cfg)
    train_x, train_y = load_split(manifest, "train", spec)
    val_x, val_y = load_split(manifest, "val", spec)
    epochs = cfg["train"]["epochs"].get(args.arch, 60)
    model = TinyConvNet(arch=args.arch, input_size=spec.center_crop,
                        epochs=epochs, batch_size=cfg["train"]["batch_size"],
                        lr=cfg["train"]["lr"], seed=cfg["seed"])
    validation = (val_x, val_y) if len(val_x) else None
    model.fit(train_x, train_y, validation=validation)
    path = args.out or cfg["models"][args.arch]
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    save_model(model, path)
    val_acc = model.train_report_.get("val_accuracy", float("nan"))
    print(f"{args.arch}: train acc {model.train_report_['train_accuracy']:.3f} "
          f"val acc {val_acc:.3f} -> {path}")
    return 0


def _attack_out_dirs(cfg):
    out = cfg["out_dir"]
    attacks = os.path.join(out, "attacks")
    os.makedirs(attacks, exist_ok=True)
    return out, attacks


def cmd_attack(args):
    cfg = _load_config(args)
    ac = _attack_config(cfg, args)
    model = load_model(_model_path(cfg, args, args.arch))
    manifest, images, labels, refs = _correctly_classified_pool(cfg, model)
    if args.count is not None:
        images, labels, refs = images[:args.count], labels[:args.count], refs[:args.count]
    out_dir, attacks_dir = _attack_out_dirs(cfg)
    writer = store.ResultsWriter(os.path.join(out_dir, "attack_results.csv"),
                                 store.ATTACK_CSV_FIELDS)
    successes = 0
    for i, (image, label, ref) in enumerate(zip(images, labels, refs)):
        record = run_attack(model, image, int(label), ac,
                            rng=image_rng(ac.seed, i))
        successes += record.success
        attack_file = store.attack_file_from_record(record, ref, ac,
                                                    model.arch_id)
        stem = ref.replace("/", "_").replace("\\", "_")
        store.save_attack(os.path.join(
            attacks_dir, f"{stem}.L{ac.curves}.json"), attack_file)
        writer.append(store.attack_row(ref, record, ac))
        print(f"[{i + 1}/{len(images)}] {ref}: "
              f"{'ok' if record.success else 'no attack'} "
              f"s_min={record.s_min if record.success else float('inf'):.4f}")
    print(f"success {successes}/{len(images)} -> {attacks_dir}")
    return 0


def cmd_validate(args):
    from .attack import validate
    from .classifier import preprocess

    cfg = _load_config(args)
    model = load_model(_model_path(cfg, args, args.arch))
    _, attacks_dir = _attack_out_dirs(cfg)
    rng = np.random.default_rng(cfg["seed"])
    spec = _spec(cfg)
    total = passed = 0
    for name in sorted(os.listdir(attacks_dir)):
        if not name.endswith(".json"):
            continue
        attack = store.load_attack(os.path.join(attacks_dir, name))
        if not attack.success:
            continue
        image = load_image(os.path.join(cfg["dataset"]["root"],
                                        attack.image_ref))
        image = preprocess(image, spec)
        ok_draws = sum(
            validate(model, image, attack.label, attack.control_points(),
                     attack.config.eot, 1, rng,
                     width_px=attack.config.width_px,
                     softness_px=attack.config.softness_px,
                     segments=attack.config.segments)
            for _ in range(args.draws))
        total += 1
        passed += ok_draws >= args.threshold * args.draws
        print(f"{name}: {ok_draws}/{args.draws} draws fooled")
    print(f"{passed}/{total} attacks pass at >= {args.threshold:.0%}")
    return 0


def cmd_gradcam(args):
    cfg = _load_config(args)
    model = load_model(_model_path(cfg, args, args.arch))
    _, attacks_dir = _attack_out_dirs(cfg)
    attack = store.load_attack(os.path.join(attacks_dir, args.attack))
    image = load_image(os.path.join(cfg["dataset"]["root"], attack.image_ref))
    from .classifier import preprocess
    from .compose import overlay
    from .raster import rasterize

    image = preprocess(image, _spec(cfg))
    clean_map = analysis.gradcam(model, image, attack.label)
    doodled = overlay(image, rasterize(attack.control_points(),
                                       image.shape[:2],
                                       attack.config.width_px,
                                       attack.config.softness_px))
    doodled_map = analysis.gradcam(model, doodled, attack.label)
    shift = analysis.saliency_shift(clean_map, doodled_map)
    os.makedirs(args.out or cfg["out_dir"], exist_ok=True)
    base = os.path.join(args.out or cfg["out_dir"],
                        os.path.splitext(args.attack)[0])
    from .data import save_png

    for tag, img, sal in (("clean", image, clean_map),
                          ("doodled", doodled, doodled_map)):
        heat = sal.upsampled[:, :, np.newaxis]
        blend = np.clip(0.5 * img + 0.5 * np.concatenate(
            [heat, np.zeros_like(heat), 1.0 - heat], axis=2), 0, 1)
        save_png(f"{base}.{tag}.cam.png", blend)
    print(f"saliency shift (clean vs doodled): {shift:.4f}")
    return 0


def cmd_transfer(args):
    cfg = _load_config(args)
    source = load_model(cfg["models"][args.source])
    target = load_model(cfg["models"][args.target])
    out_dir, attacks_dir = _attack_out_dirs(cfg)
    from .classifier import preprocess

    spec = _spec(cfg)
    attacks = []
    for name in sorted(os.listdir(attacks_dir)):
        if not name.endswith(".json"):
            continue
        attack = store.load_attack(os.path.join(attacks_dir, name))
        if attack.arch_id != source.arch_id:
            continue
        image = preprocess(load_image(os.path.join(cfg["dataset"]["root"],
                                                   attack.image_ref)), spec)
        record_like = _record_from_file(attack)
        attacks.append((record_like, image, attack.label))
    report = analysis.transfer_eval(attacks, source, target)
    writer = store.ResultsWriter(os.path.join(out_dir, "transfer_results.csv"),
                                 store.TRANSFER_CSV_FIELDS)
    writer.append(store.transfer_row(report))
    score = "undefined" if not report.defined else f"{report.score:.2f}"
    print(f"{args.source} -> {args.target}: {report.n_success}/{report.n_total} "
          f"score {score}")
    return 0


def _record_from_file(attack):
    from .attack import AttackRecord

    return AttackRecord(
        success=attack.success, s_min=attack.s_min,
        best_points=attack.control_points(),
        best_points_norm=attack.best_points_norm,
        canvas_hw=attack.canvas_hw, label=attack.label, seed=attack.seed,
        restarts_used=0, phase2_entered_at=None, iteration_log=[])


def cmd_ablate(args):
    cfg = _load_config(args)
    ac = _attack_config(cfg, args)
    model = load_model(_model_path(cfg, args, args.arch))
    _, images, labels, refs = _correctly_classified_pool(cfg, model)
    if args.count is not None:
        images, labels = images[:args.count], labels[:args.count]
    cfg_on = ac
    cfg_off = replace(ac, eot=EotConfig.identity())
    report = analysis.ablation_run(images, labels, model, cfg_on, cfg_off,
                                   replication_seed=cfg["seed"])
    out_dir, _ = _attack_out_dirs(cfg)
    writer = store.ResultsWriter(os.path.join(out_dir, "ablation_results.csv"),
                                 store.ABLATION_CSV_FIELDS)
    for row in store.ablation_rows(report):
        writer.append(row)
        print(row)
    return 0


def cmd_export(args):
    cfg = _load_config(args)
    _, attacks_dir = _attack_out_dirs(cfg)
    attack = store.load_attack(os.path.join(attacks_dir, args.attack))
    svg = store.export_svg(attack)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(svg)
        print(f"wrote {args.out}")
    else:
        print(svg, end="")
    return 0


def cmd_serve(args):
    import uvicorn

    from .service import create_app

    cfg = _load_config(args)
    _, attacks_dir = _attack_out_dirs(cfg)
    manifest = scan_dataset(cfg["dataset"]["root"], seed=cfg["seed"],
                            fractions=tuple(cfg["dataset"]["fractions"]))
    names = {i + 1: name for i, name in enumerate(manifest.classes)}
    app = create_app(_model_path(cfg, args, args.arch), cfg["dataset"]["root"],
                     attacks_dir, os.path.join(cfg["out_dir"], "sessions"),
                     _spec(cfg), names)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="strokefool",
        description="Optimize and evaluate stroke attacks on image classifiers")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, model=False, arch_default="cnn-a"):
        p.add_argument("--config", help="JSON run config path")
        p.add_argument("--seed", type=int)
        p.add_argument("--dataset", help="dataset root override")
        p.add_argument("--out", help="output directory/file override")
        p.add_argument("--arch", default=arch_default,
                       choices=("cnn-a", "cnn-b"))
        if model:
            p.add_argument("--model", help="model file override")

    p = sub.add_parser("gen-dataset", help="write the synthetic shape dataset")
    common(p)
    p.set_defaults(func=cmd_gen_dataset)

    p = sub.add_parser("train", help="train a classifier on the dataset")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="optimize attacks over the pool split")
    common(p, model=True)
    p.add_argument("--L", type=int, help="number of curves")
    p.add_argument("--n-itr", type=int, dest="n_itr")
    p.add_argument("--alpha", type=float, help="size regularizer weight")
    p.add_argument("--eot", dest="eot", action="store_true", default=None)
    p.add_argument("--no-eot", dest="eot", action="store_false")
    p.add_argument("--count", type=int, help="attack only the first N images")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("validate", help="re-validate saved attacks")
    common(p, model=True)
    p.add_argument("--draws", type=int, default=100)
    p.add_argument("--threshold", type=float, default=0.9)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("gradcam", help="saliency overlays for one attack")
    common(p, model=True)
    p.add_argument("--attack", required=True, help="attack file name")
    p.set_defaults(func=cmd_gradcam)

    p = sub.add_parser("transfer", help="score attacks on another classifier")
    common(p)
    p.add_argument("--source", required=True, choices=("cnn-a", "cnn-b"))
    p.add_argument("--target", required=True, choices=("cnn-a", "cnn-b"))
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("ablate", help="run the misalignment ablation")
    common(p, model=True)
    p.add_argument("--L", type=int)
    p.add_argument("--n-itr", type=int, dest="n_itr")
    p.add_argument("--alpha", type=float)
    p.add_argument("--count", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export", help="export one attack as SVG")
    common(p)
    p.add_argument("--attack", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("serve", help="run the replication HTTP service")
    common(p, model=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8800)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        return _fail("file not found; run gen-dataset/train first?",
                     path=str(exc))
    except Exception as exc:  # surface everything as a machine-readable line
        return _fail(type(exc).__name__, detail=str(exc))


if __name__ == "__main__":
    sys.exit(main())

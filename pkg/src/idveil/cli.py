"""Command line entry points for the anonymization toolkit."""

from __future__ import annotations

import json
import os
from pathlib import Path

import click
import cv2
import numpy as np

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".webp")


def _read_image(path: str | Path) -> np.ndarray:
    bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if bgr is None:
        raise click.ClickException(f"cannot read image {path}")
    return cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB).astype(np.float32) / 255.0


def _write_image(path: str | Path, image: np.ndarray) -> None:
    u8 = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    if not cv2.imwrite(str(path), cv2.cvtColor(u8, cv2.COLOR_RGB2BGR)):
        raise click.ClickException(f"cannot write image {path}")


def _list_images(path: Path) -> list[Path]:
    if path.is_file():
        return [path]
    images = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not images:
        raise click.ClickException(f"no images under {path}")
    return images


def _load_generators(ckpt_dir: str | Path) -> dict:
    from .generator import load_checkpoint

    generators = {}
    for name in ("body_dense", "body", "face"):
        path = Path(ckpt_dir) / f"{name}.pt"
        if path.exists():
            bundle = load_checkpoint(path)
            model = bundle.ema if bundle.ema is not None else bundle.generator
            model.eval()
            generators[name] = model
    if not generators:
        raise click.ClickException(f"no generator checkpoints under {ckpt_dir}")
    return generators


def _build_adapters(specs: tuple[str, ...]) -> list:
    from .detection import StubAdapter

    adapters = []
    for spec in specs:
        if "=" in spec:
            source, _, path = spec.partition("=")
            adapters.append(StubAdapter.from_file(path, source=source))
        else:
            adapters.append(StubAdapter.from_file(spec))
    return adapters


@click.group()
def main():
    """Generative full-body and face anonymization toolkit."""


@main.command()
@click.option("--image", "image_path", required=True, type=click.Path(exists=True))
@click.option("--adapter", "adapters", multiple=True, required=True,
              help="Annotation file, optionally as source=path.")
@click.option("--profile", default="default", show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def detect(image_path, adapters, profile, out_path):
    """Run the detector ensemble and write fused detections as JSON."""
    from .detection import detect_all, fuse, fused_to_json

    image = _read_image(image_path)
    ensemble = detect_all(image, _build_adapters(adapters), thresholds=profile)
    fused = fuse(ensemble.detections)
    payload = {
        "detections": [fused_to_json(d) for d in fused],
        "errors": [{"adapter": e.adapter, "error": e.error} for e in ensemble.errors],
    }
    Path(out_path).write_text(json.dumps(payload, indent=2))
    click.echo(f"{len(fused)} detections ({len(ensemble.errors)} adapter errors) -> {out_path}")


@main.command()
@click.option("--frames", "frames_path", required=True, type=click.Path(exists=True),
              help="JSONL with one {'frame': i, 'detections': [...]} object per line.")
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def track(frames_path, seed, out_path):
    """Associate per-frame detections into identity-stable tracks."""
    from .detection import fused_from_json
    from .tracking import Tracker

    tracker = Tracker(seed=seed)
    with open(out_path, "w") as out:
        for line in Path(frames_path).read_text().splitlines():
            if not line.strip():
                continue
            obj = json.loads(line)
            detections = [fused_from_json(d) for d in obj["detections"]]
            results = tracker.feed(obj["frame"], detections)
            row = {
                "frame": obj["frame"],
                "tracks": [
                    {"track_id": tid, "bbox": [float(v) for v in det.bbox]}
                    for tid, det, _ in results
                ],
            }
            out.write(json.dumps(row) + "\n")
    click.echo(f"tracking log -> {out_path}")


@main.command()
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--image", "image_path", required=True, type=click.Path(exists=True))
@click.option("--mask", "mask_path", required=True, type=click.Path(exists=True),
              help="Binary mask image; nonzero pixels are kept.")
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def synthesize(ckpt, image_path, mask_path, seed, out_path):
    """Inpaint the masked-out part of a single crop."""
    import torch

    from .generator import load_checkpoint, sample_z

    bundle = load_checkpoint(ckpt)
    model = bundle.ema if bundle.ema is not None else bundle.generator
    model.eval()
    th, tw = model.config.input_resolution
    image = cv2.resize(_read_image(image_path), (tw, th), interpolation=cv2.INTER_LINEAR)
    mask_raw = cv2.imread(str(mask_path), cv2.IMREAD_GRAYSCALE)
    if mask_raw is None:
        raise click.ClickException(f"cannot read mask {mask_path}")
    mask = (cv2.resize(mask_raw, (tw, th), interpolation=cv2.INTER_NEAREST) > 127).astype(np.float32)

    image_t = torch.from_numpy(image.transpose(2, 0, 1))[None]
    mask_t = torch.from_numpy(mask)[None, None]
    cond = None
    if model.config.condition != "none":
        cond = torch.zeros(1, 16, th, tw)
    z = sample_z(model.config, 1, seed)
    with torch.no_grad():
        out = model.synthesize(image_t, mask_t, z, cond=cond)
    _write_image(out_path, out[0].numpy().transpose(1, 2, 0))
    click.echo(f"synthesized crop -> {out_path}")


@main.command()
@click.option("--data", default="toy", show_default=True,
              help="'toy' for the procedural dataset or a directory of .npz crops.")
@click.option("--steps", default=2000, show_default=True)
@click.option("--batch", default=32, show_default=True)
@click.option("--resolution", default="96x64", show_default=True)
@click.option("--condition", default="dense", type=click.Choice(["dense", "none"]), show_default=True)
@click.option("--base-channels", default=16, show_default=True)
@click.option("--max-channels", default=128, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--fid-every", default=0, show_default=True, help="Evaluate Fréchet distance every N steps.")
@click.option("--resume", type=click.Path(exists=True), default=None)
@click.option("--out", "out_dir", required=True, type=click.Path())
def train(data, steps, batch, resolution, condition, base_channels, max_channels, seed,
          fid_every, resume, out_dir):
    """Adversarially train an inpainting generator."""
    from .generator import CONDITION_DENSE, CONDITION_NONE, GeneratorConfig
    from .training import NpzDirectoryDataset, TrainConfig, Trainer, ToyFigureDataset
    from .evaluation import RandomProjectionExtractor

    h, w = (int(v) for v in resolution.split("x"))
    g_config = GeneratorConfig(
        input_resolution=(h, w),
        condition=CONDITION_DENSE if condition == "dense" else CONDITION_NONE,
        base_channels=base_channels,
        max_channels=max_channels,
    )
    t_config = TrainConfig(batch_size=batch, steps=steps, seed=seed)
    dataset = ToyFigureDataset(resolution=(h, w), seed=seed) if data == "toy" else NpzDirectoryDataset(data)
    trainer = Trainer(g_config, t_config, dataset, out_dir=out_dir)
    if resume:
        trainer.restore(resume)
        click.echo(f"resumed from step {trainer.step}")

    eval_fn = None
    if fid_every:
        extractor = RandomProjectionExtractor(input_shape=(3, h, w), dim=64, seed=0)
        eval_fn = lambda tr: _toy_frechet(tr, extractor)  # noqa: E731

    trainer.train(steps, eval_fn=eval_fn, eval_every=fid_every)
    ckpt = Path(out_dir) / "checkpoint.pt"
    trainer.save(ckpt)
    trainer.export_generator(Path(out_dir) / "generator.pt")
    click.echo(f"trained {trainer.step} steps -> {ckpt}")


def _toy_frechet(trainer, extractor, n: int = 128) -> float:
    """Fréchet distance between real toy samples and current EMA syntheses."""
    import torch

    from .evaluation import frechet_from_features
    from .training import batch_to_tensors

    rng = np.random.default_rng(0)
    indices = rng.integers(0, len(trainer.dataset), size=n)
    image, mask, cond = batch_to_tensors(trainer.dataset.batch(indices))
    if trainer.g_config.condition == "none":
        cond = None
    g = torch.Generator().manual_seed(0)
    z = torch.randn(n, trainer.g_config.z_dim, generator=g)
    with torch.no_grad():
        fake = trainer.g_ema.synthesize(image, mask, z, cond=cond)
    return frechet_from_features(extractor(image.numpy()), extractor(fake.numpy()))


@main.command()
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--prompt", required=True)
@click.option("--n", "n_images", default=256, show_default=True)
@click.option("--steps", default=50, show_default=True)
@click.option("--scorer", default="brightness", type=click.Choice(["brightness"]), show_default=True,
              help="Attribute scorer; a text-image model can be plugged in programmatically.")
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
def edit(ckpt, prompt, n_images, steps, scorer, seed, out_dir):
    """Find a named global edit direction and store it."""
    import torch

    from .editing import DirectionSearchConfig, brightness_scorer, find_global_direction, save_directions
    from .generator import load_checkpoint
    from .training import ToyFigureDataset, batch_to_tensors

    bundle = load_checkpoint(ckpt)
    model = bundle.ema if bundle.ema is not None else bundle.generator
    h, w = model.config.input_resolution
    dataset = ToyFigureDataset(resolution=(h, w), seed=seed)
    g = torch.Generator().manual_seed(seed)
    contexts = []
    for i in range(n_images):
        image, mask, cond = batch_to_tensors(dataset.batch(np.array([i])))
        contexts.append({
            "image": image,
            "mask": mask,
            "cond": cond if model.config.condition != "none" else None,
            "z": torch.randn(1, model.config.z_dim, generator=g),
        })
    config = DirectionSearchConfig(n_images=n_images, steps=steps, seed=seed)
    direction = find_global_direction(model, brightness_scorer, prompt, contexts, config)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "directions.json"
    existing = []
    if path.exists():
        from .editing import load_directions

        existing = [d for name, d in sorted(load_directions(path).items()) if name != direction.name]
    save_directions(path, existing + [direction])
    click.echo(f"direction {direction.name!r} -> {path}")


@main.command()
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--rules", default="fdh", type=click.Choice(["fdh", "fdf256"]), show_default=True)
@click.option("--val-fraction", default=0.02, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
def forge(in_path, rules, val_fraction, seed, out_dir):
    """Filter candidate crops into a dataset manifest."""
    if rules == "fdh":
        from .forge import run_filter_pipeline

        summary = run_filter_pipeline(in_path, out_dir, val_fraction=val_fraction, seed=seed)
        click.echo(json.dumps(summary))
        return

    from .forge import build_fdf256

    out_dir = Path(out_dir)
    (out_dir / "crops").mkdir(parents=True, exist_ok=True)
    n_accepted = n_rejected = 0
    with (out_dir / "verdicts.jsonl").open("w") as out:
        for line_no, line in enumerate(Path(in_path).read_text().splitlines()):
            if not line.strip():
                continue
            rec = json.loads(line)
            image = cv2.imread(str(Path(in_path).parent / rec["image"]), cv2.IMREAD_COLOR)
            if image is None:
                raise click.ClickException(f"cannot read {rec['image']}")
            verdict = build_fdf256(image, tuple(rec["face_bbox"]))
            row = {"index": line_no, "image": rec["image"], "accepted": verdict.accepted}
            if verdict.accepted:
                crop_path = out_dir / "crops" / f"{line_no:06d}.png"
                cv2.imwrite(str(crop_path), verdict.crop)
                row["crop"] = str(crop_path.name)
                n_accepted += 1
            else:
                row["reason"] = verdict.reason
                n_rejected += 1
            out.write(json.dumps(row) + "\n")
    click.echo(json.dumps({"accepted": n_accepted, "rejected": n_rejected}))


@main.command()
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--mode", default="gan", type=click.Choice(["gan", "pixelate8", "pixelate16", "maskout"]),
              show_default=True)
@click.option("--adapter", "adapters", multiple=True, required=True,
              help="Detector annotation file, optionally source=path.")
@click.option("--ckpt-dir", type=click.Path(exists=True), default=None)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
def anonymize(in_path, mode, adapters, ckpt_dir, seed, out_dir):
    """Anonymize an image or directory; writes renders plus audit side-cars."""
    from .anonymizer import anonymize_image, anonymize_traditional, plan
    from .detection import detect_all, fuse

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    generators = _load_generators(ckpt_dir) if mode == "gan" else None
    if mode == "gan" and generators is None:
        raise click.ClickException("--ckpt-dir is required for gan mode")

    for image_path in _list_images(Path(in_path)):
        image = _read_image(image_path)
        ensemble = detect_all(image, _build_adapters(adapters))
        detections = fuse(ensemble.detections)
        plan_ = plan(detections, seed=seed)
        if mode == "gan":
            result = anonymize_image(image, plan_, generators)
        else:
            result = anonymize_traditional(image, plan_, mode)
        _write_image(out_dir / image_path.name, result.image)
        sidecar = {
            "image": image_path.name,
            "mode": mode,
            "seed": seed,
            "detections": len(detections),
            "plan": result.audit,
        }
        (out_dir / f"{image_path.stem}.json").write_text(json.dumps(sidecar, indent=2))
        click.echo(f"{image_path.name}: {len(detections)} regions -> {out_dir / image_path.name}")


@main.group()
def evaluate():
    """Quality and anonymization-strength metrics."""


def _load_image_features(directory: str | Path, extractor_name: str) -> np.ndarray:
    from .evaluation import make_extractor

    paths = _list_images(Path(directory))
    images = np.stack([_read_image(p).transpose(2, 0, 1) for p in paths])
    if extractor_name == "random_projection":
        extractor = make_extractor(extractor_name, input_shape=images.shape[1:])
    elif extractor_name == "downsample":
        extractor = make_extractor(extractor_name)
    else:
        extractor = make_extractor(extractor_name)
    return extractor(images)


@evaluate.command()
@click.option("--real", "real_dir", required=True, type=click.Path(exists=True))
@click.option("--fake", "fake_dir", required=True, type=click.Path(exists=True))
@click.option("--extractor", default="random_projection", show_default=True)
@click.option("--out", "out_path", type=click.Path(), default=None)
def fid(real_dir, fake_dir, extractor, out_path):
    """Fréchet distance between two image directories."""
    from .evaluation import frechet_from_features

    value = frechet_from_features(
        _load_image_features(real_dir, extractor), _load_image_features(fake_dir, extractor)
    )
    payload = {"frechet_distance": value, "extractor": extractor}
    if out_path:
        Path(out_path).write_text(json.dumps(payload, indent=2))
    click.echo(json.dumps(payload))


@evaluate.command()
@click.option("--gallery", "gallery_dir", required=True, type=click.Path(exists=True))
@click.option("--queries", "query_dir", required=True, type=click.Path(exists=True))
@click.option("--labels", "labels_path", required=True, type=click.Path(exists=True),
              help="CSV of filename,identity rows covering both directories.")
@click.option("--extractor", default="identity", show_default=True)
@click.option("--out", "out_path", type=click.Path(), default=None)
def reid(gallery_dir, query_dir, labels_path, extractor, out_path):
    """Re-identification retrieval metrics of queries against a gallery."""
    import csv

    from .evaluation import evaluate_reid, make_extractor

    labels = {}
    with open(labels_path) as fh:
        for row in csv.reader(fh):
            if row:
                labels[row[0]] = row[1]

    def _features_ids(directory):
        paths = _list_images(Path(directory))
        missing = [p.name for p in paths if p.name not in labels]
        if missing:
            raise click.ClickException(f"unlabeled images: {missing[:5]}")
        images = np.stack([_read_image(p).transpose(2, 0, 1) for p in paths])
        ex = make_extractor(extractor) if extractor != "random_projection" else make_extractor(
            extractor, input_shape=images.shape[1:]
        )
        return ex(images), np.array([labels[p.name] for p in paths])

    g_feat, g_ids = _features_ids(gallery_dir)
    q_feat, q_ids = _features_ids(query_dir)
    result = evaluate_reid(q_feat, q_ids, g_feat, g_ids)
    payload = result.as_dict()
    if out_path:
        Path(out_path).write_text(json.dumps(payload, indent=2))
    click.echo(json.dumps(payload))


@main.command()
@click.option("--metrics", "metrics_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
def report(metrics_path, out_dir):
    """Render loss/logit/Fréchet figures and a CSV summary from a metrics log."""
    from .report import render_report

    summary = render_report(metrics_path, out_dir)
    click.echo(json.dumps(summary))


@main.command()
@click.option("--port", default=8000, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--ckpt-dir", default=None, type=click.Path(exists=True),
              help="Defaults to $IDVEIL_CKPT_DIR.")
@click.option("--adapter", "adapters", multiple=True,
              help="Stub detector annotation file, optionally source=path.")
@click.option("--directions", "directions_path", default=None, type=click.Path(exists=True))
@click.option("--centers", "centers_path", default=None, type=click.Path(exists=True),
              help="Latent cluster centers (.npy, (k, w_dim)); required for psi < 1.")
@click.option("--token", default=None, help="Require 'Authorization: Bearer <token>'.")
def serve(port, host, ckpt_dir, adapters, directions_path, centers_path, token):
    """Run the HTTP anonymization service."""
    import uvicorn

    from .detection import detect_all, fuse
    from .editing import LatentCenters, load_directions
    from .service import Engine, ServiceConfig, create_app

    ckpt_dir = ckpt_dir or os.environ.get("IDVEIL_CKPT_DIR")
    if ckpt_dir is None:
        raise click.ClickException("--ckpt-dir or $IDVEIL_CKPT_DIR is required")
    generators = _load_generators(ckpt_dir)
    adapter_objs = _build_adapters(adapters) if adapters else []

    def detect_fn(image):
        if not adapter_objs:
            return []
        return fuse(detect_all(image, adapter_objs).detections)

    directions = load_directions(directions_path) if directions_path else {}
    centers = LatentCenters(np.load(centers_path)) if centers_path else None
    engine = Engine(detect=detect_fn, generators=generators, directions=directions,
                    centers=centers)
    app = create_app(engine, ServiceConfig(token=token))
    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()

"""End-to-end property suite; each test is one release criterion.

Every test carries a one-line docstring naming its criterion so the conftest
summary prints a PASS/FAIL checklist after the run. The training smoke test
runs a real 2,000-step adversarial loop and dominates the suite's runtime, so
it is defined last.
"""

import time

import numpy as np
import pytest
import torch
from fastapi.testclient import TestClient
from scipy import stats as scipy_stats

from idveil.anonymizer import (
    anonymize_image,
    anonymize_traditional,
    crop_for_detection,
    derive_latent,
    plan,
)
from idveil.detection import (
    Category,
    FusedDetection,
    RawDetection,
    Source,
    fuse,
)
from idveil.editing import (
    DirectionSearchConfig,
    EditDirection,
    apply_direction,
    brightness_scorer,
    fit_centers,
    find_global_direction,
    truncate,
)
from idveil.evaluation import (
    FeatureStatistics,
    IdentityExtractor,
    RandomProjectionExtractor,
    evaluate_reid,
    frechet_distance,
    frechet_from_features,
)
from idveil.forge import FilterConfig, filter_fdh
from idveil.generator import (
    Generator,
    GeneratorConfig,
    InstanceNorm,
    body_config,
    body_dense_config,
    face_config,
    tiny_config,
    z_from_numpy,
)
from idveil.geometry import box_to_mask, mask_iou
from idveil.service import Engine, create_app, encode_png
from idveil.tracking import Tracker
from idveil.training import (
    ToyFigureDataset,
    TrainConfig,
    Trainer,
    batch_to_tensors,
)

from test_forge import annotation_arrays, good_record


def small_generator(resolution=(32, 32), seed=0, **kwargs):
    torch.manual_seed(seed)
    gen = Generator(tiny_config(resolution=resolution, **kwargs))
    gen.eval()
    return gen


# ---------------------------------------------------------------------------
# Composition


def test_composition_contract():
    """Composition: kept pixels survive synthesis bit-exact, 1000 triples per resolution in <2 min"""
    start = time.monotonic()
    rng = np.random.default_rng(2024)
    for resolution in ((96, 64), (256, 256)):
        gen = small_generator(resolution, n_downsamples=5)
        h, w = resolution
        batch = 50
        done = 0
        while done < 1000:
            images = torch.from_numpy(
                rng.random((batch, 3, h, w), dtype=np.float32)
            )
            masks = torch.from_numpy(
                (rng.random((batch, 1, h, w)) < 0.5).astype(np.float32)
            )
            if done == 0:  # pin the two degenerate masks
                masks[0] = 1.0
                masks[1] = 0.0
            z = torch.from_numpy(
                rng.standard_normal((batch, gen.config.z_dim)).astype(np.float32)
            )
            with torch.no_grad():
                out = gen.synthesize(images, masks, z)
            keep = masks.expand_as(images) > 0.5
            assert torch.equal(out[keep], images[keep])
            done += batch
    assert time.monotonic() - start < 120.0


# ---------------------------------------------------------------------------
# Architecture


def test_architecture_shapes():
    """Architecture: 9x5 body bottleneck, 16 dense channels, all configs within 10% of 43M, unit-variance normalization"""
    assert body_config().bottleneck_resolution == (9, 5)
    assert body_dense_config().bottleneck_resolution == (9, 5)
    assert body_dense_config().in_channels - body_config().in_channels == 16

    for config in (body_config(), body_dense_config(), face_config()):
        gen = Generator(config)
        n_params = sum(p.numel() for p in gen.parameters())
        assert abs(n_params - 43e6) / 43e6 < 0.10, (config.condition, n_params)
        del gen

    norm = InstanceNorm()
    x = torch.from_numpy(
        np.random.default_rng(3).normal(2.0, 5.0, size=(4, 6, 17, 13)).astype(np.float32)
    )
    y = norm(x)
    mean = y.mean(dim=(2, 3))
    var = y.var(dim=(2, 3), unbiased=False)
    assert mean.abs().max().item() < 1e-4
    assert (var - 1.0).abs().max().item() < 1e-4


# ---------------------------------------------------------------------------
# Gradients


def test_gradient_check():
    """Gradients: analytic vs central differences agree to 1e-2 on 100+ coordinates"""
    torch.manual_seed(5)
    gen = Generator(tiny_config()).double()
    rng = np.random.default_rng(5)
    h, w = gen.config.input_resolution

    image = torch.from_numpy(rng.random((1, 3, h, w))).double()
    mask = torch.from_numpy((rng.random((1, 1, h, w)) < 0.6).astype(np.float64))
    hole = 1.0 - mask
    z = torch.from_numpy(rng.standard_normal((1, gen.config.z_dim))).double()
    target = torch.from_numpy(rng.random((1, 3, h, w))).double()

    def loss_value():
        out = gen(image * mask, mask, z)
        return ((out - target).square() * hole).mean()

    loss = loss_value()
    gen.zero_grad()
    loss.backward()

    params = [p for p in gen.parameters()]
    per_tensor = int(np.ceil(100 / len(params))) + 1
    checked = 0
    eps = 1e-6
    for p in params:
        flat = p.detach().view(-1)
        grad = p.grad.view(-1)
        idx = rng.choice(flat.numel(), size=min(per_tensor, flat.numel()), replace=False)
        for i in idx:
            original = flat[i].item()
            with torch.no_grad():
                flat[i] = original + eps
                hi = loss_value().item()
                flat[i] = original - eps
                lo = loss_value().item()
                flat[i] = original
            numeric = (hi - lo) / (2 * eps)
            analytic = grad[i].item()
            # the floor absorbs central-difference roundoff on coordinates
            # whose true gradient is at noise scale
            denom = max(abs(numeric), abs(analytic), 1e-6)
            assert abs(numeric - analytic) / denom < 1e-2, (numeric, analytic)
            checked += 1
    assert checked >= 100


# ---------------------------------------------------------------------------
# Fusion


def _rect_mask(shape, x0, y0, x1, y1):
    mask = np.zeros(shape, dtype=np.uint8)
    mask[y0:y1, x0:x1] = 1
    return mask


def _random_scene(rng):
    """A frame's worth of raw detections; boxes drawn near shared anchors so
    cross-source overlaps are common."""
    h, w = 48, 64
    anchors = [
        (
            int(rng.integers(0, w - 12)),
            int(rng.integers(0, h - 12)),
            int(rng.integers(8, 13)),
            int(rng.integers(8, 13)),
        )
        for _ in range(4)
    ]

    def jittered_box():
        ax, ay, aw, ah = anchors[rng.integers(0, len(anchors))]
        dx, dy = int(rng.integers(-3, 4)), int(rng.integers(-3, 4))
        x0 = min(max(0, ax + dx), w - 4)
        y0 = min(max(0, ay + dy), h - 4)
        x1 = min(w, x0 + aw)
        y1 = min(h, y0 + ah)
        return x0, y0, x1, y1

    raw = []
    for _ in range(rng.integers(0, 4)):
        x0, y0, x1, y1 = jittered_box()
        raw.append(
            RawDetection(
                source=Source.DENSE_POSE,
                bbox=(float(x0), float(y0), float(x1), float(y1)),
                confidence=float(rng.uniform(0.3, 1.0)),
                segmentation=_rect_mask((h, w), x0, y0, x1, y1),
                dense_embedding=np.zeros((16, h, w), dtype=np.float32),
            )
        )
    for _ in range(rng.integers(0, 4)):
        x0, y0, x1, y1 = jittered_box()
        raw.append(
            RawDetection(
                source=Source.INSTANCE_SEG,
                bbox=(float(x0), float(y0), float(x1), float(y1)),
                confidence=float(rng.uniform(0.3, 1.0)),
                segmentation=_rect_mask((h, w), x0, y0, x1, y1),
            )
        )
    for _ in range(rng.integers(0, 3)):
        x0, y0, x1, y1 = jittered_box()
        raw.append(
            RawDetection(
                source=Source.FACE,
                bbox=(float(x0), float(y0), float(x1), float(y1)),
                confidence=float(rng.uniform(0.3, 1.0)),
            )
        )
    rng.shuffle(raw)
    return raw


def _fuse_oracle(raw, iou_merge=0.4):
    """Brute-force restatement of the fusion rules: repeatedly select the
    best remaining dense/seg pair instead of sorting, then categorize."""
    dense = [(i, d) for i, d in enumerate(raw) if d.source == Source.DENSE_POSE]
    seg = [(i, d) for i, d in enumerate(raw) if d.source == Source.INSTANCE_SEG]
    faces = [(i, d) for i, d in enumerate(raw) if d.source == Source.FACE]

    match_of_dense = {}
    taken_seg = set()
    while True:
        candidates = []
        for di, (_, d) in enumerate(dense):
            if di in match_of_dense:
                continue
            for si, (_, s) in enumerate(seg):
                if si in taken_seg:
                    continue
                iou = mask_iou(d.segmentation, s.segmentation)
                if iou > iou_merge:
                    candidates.append((iou, di, si))
        if not candidates:
            break
        _, di, si = min(candidates, key=lambda c: (-c[0], c[1], c[2]))
        match_of_dense[di] = si
        taken_seg.add(si)

    out = []
    for di, (i, d) in enumerate(dense):
        if di in match_of_dense:
            j, s = seg[match_of_dense[di]]
            region = np.logical_or(d.segmentation, s.segmentation).astype(np.uint8)
            bbox = (
                min(d.bbox[0], s.bbox[0]),
                min(d.bbox[1], s.bbox[1]),
                max(d.bbox[2], s.bbox[2]),
                max(d.bbox[3], s.bbox[3]),
            )
            out.append(
                (Category.PERSON_WITH_DENSE, bbox, region,
                 max(d.confidence, s.confidence), (i, j))
            )
        else:
            out.append(
                (Category.PERSON_WITH_DENSE, d.bbox,
                 d.segmentation.astype(np.uint8), d.confidence, (i,))
            )
    for si, (j, s) in enumerate(seg):
        if si not in taken_seg:
            out.append(
                (Category.PERSON_PLAIN, s.bbox,
                 s.segmentation.astype(np.uint8), s.confidence, (j,))
            )
    person_masks = [d.segmentation for _, d in dense] + [s.segmentation for _, s in seg]
    for i, f in faces:
        cx = int((f.bbox[0] + f.bbox[2]) / 2)
        cy = int((f.bbox[1] + f.bbox[3]) / 2)
        if any(
            0 <= cy < m.shape[0] and 0 <= cx < m.shape[1] and m[cy, cx]
            for m in person_masks
        ):
            continue
        shape = person_masks[0].shape if person_masks else (
            int(np.ceil(f.bbox[3])), int(np.ceil(f.bbox[2])))
        out.append(
            (Category.FACE_ONLY, f.bbox, box_to_mask(f.bbox, shape), f.confidence, (i,))
        )
    return out


def test_fusion_oracle():
    """Fusion: 500 random scenes match a brute-force pairing oracle exactly"""
    rng = np.random.default_rng(11)
    scenes = 0
    fused_total = 0
    while scenes < 500:
        raw = _random_scene(rng)
        if len(raw) > 10:
            continue
        scenes += 1
        expected = _fuse_oracle(raw)
        actual = fuse(raw)
        assert len(actual) == len(expected)
        for got, (category, bbox, region, confidence, contributors) in zip(
            actual, expected
        ):
            assert got.category == category
            assert got.bbox == pytest.approx(bbox)
            assert np.array_equal(got.anonymization_region, region)
            assert got.confidence == pytest.approx(confidence)
            assert got.contributor_ids == contributors
        fused_total += len(actual)
    assert fused_total > 500  # the scenes actually exercised the rules


# ---------------------------------------------------------------------------
# Dataset filtering


def test_filter_fixture_verdicts():
    """Filtering: 20 boundary records reproduce the expected verdict table exactly"""
    v134, p134 = annotation_arrays(134)
    v135, p135 = annotation_arrays(135)

    def iou_masks(overlap):
        a = np.ones((10, 10), dtype=np.uint8)
        b = np.zeros((10, 10), dtype=np.uint8)
        b.flat[:overlap] = 1
        return a, b

    kp7 = {
        name: (x, y, conf if i < 7 else 0.0)
        for i, (name, (x, y, conf)) in enumerate(good_record().keypoints.items())
    }
    kp8 = {
        name: (x, y, conf if i < 8 else 0.0)
        for i, (name, (x, y, conf)) in enumerate(good_record().keypoints.items())
    }
    iou49_a, iou49_b = iou_masks(49)
    iou50_a, iou50_b = iou_masks(50)

    default = FilterConfig()
    per_dim = FilterConfig(area_mode="per_dimension")
    all_bad = good_record(
        confidence=0.5,
        height=100,
        width=60,
        is_grayscale=True,
        quality_score=1.0,
        cse_vertex_ids=v134,
        part_partition=p134,
        instance_mask=iou49_a,
        cse_mask=iou49_b,
        keypoints=kp7,
    )

    table = [
        (good_record(), default, True, ()),
        (good_record(confidence=0.97), default, False, ("confidence",)),
        (good_record(confidence=0.98), default, True, ()),
        (good_record(cse_vertex_ids=v134, part_partition=p134), default, False, ("cse_vertices",)),
        (good_record(cse_vertex_ids=v135, part_partition=p135), default, True, ()),
        (good_record(keypoints=kp7), default, False, ("keypoints",)),
        (good_record(keypoints=kp8), default, True, ()),
        (good_record(instance_mask=iou49_a, cse_mask=iou49_b), default, False, ("segmentation_iou",)),
        (good_record(instance_mask=iou50_a, cse_mask=iou50_b), default, True, ()),
        (good_record(height=143, width=80), default, False, ("resolution",)),
        (good_record(height=144, width=80), default, True, ()),
        (good_record(height=120, width=96), default, True, ()),
        (good_record(is_grayscale=True), default, False, ("grayscale",)),
        (good_record(quality_score=2.9), default, False, ("quality",)),
        (good_record(quality_score=3.0), default, True, ()),
        (good_record(confidence=0.97, quality_score=2.9), default, False, ("confidence", "quality")),
        (all_bad, default, False,
         ("confidence", "resolution", "grayscale", "quality",
          "cse_vertices", "segmentation_iou", "keypoints")),
        (good_record(height=120, width=96), per_dim, False, ("resolution",)),
        (good_record(height=144, width=79), per_dim, False, ("resolution",)),
        (good_record(height=144, width=80), per_dim, True, ()),
    ]
    assert len(table) == 20
    for record, config, accepted, failed in table:
        verdict = filter_fdh(record, config)
        assert verdict.accepted == accepted, (record.source_image_id, verdict)
        assert verdict.failed_criteria == failed, (verdict.failed_criteria, failed)


# ---------------------------------------------------------------------------
# Stitching


def _person(region, frame_shape, index):
    ys, xs = np.nonzero(region)
    bbox = (float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))
    return FusedDetection(
        category=Category.PERSON_PLAIN,
        bbox=bbox,
        anonymization_region=region,
        confidence=0.9,
        contributor_ids=(index,),
    )


def test_stitching_provenance():
    """Stitching: overlap pixels belong to the largest detection; reversed order flips ownership"""
    frame_shape = (64, 64)
    frame = np.full((*frame_shape, 3), 0.5, dtype=np.float32)
    generators = {
        "body": small_generator(), "body_dense": None, "face": None,
    }

    large = _person(_rect_mask(frame_shape, 8, 8, 40, 56), frame_shape, 0)
    small = _person(_rect_mask(frame_shape, 24, 16, 56, 48), frame_shape, 1)
    overlap = (large.anonymization_region > 0) & (small.anonymization_region > 0)
    assert overlap.any() and large.coverage > small.coverage

    plan_asc = plan([large, small], seed=0)
    ascending = anonymize_image(frame, plan_asc, generators)
    order_of = {e["detection_index"]: e["order"] for e in ascending.audit}
    assert (ascending.provenance[overlap] == order_of[0]).all()
    small_only = (small.anonymization_region > 0) & ~overlap
    assert (ascending.provenance[small_only] == order_of[1]).all()
    assert (ascending.provenance[~((large.anonymization_region > 0)
                                   | (small.anonymization_region > 0))] == -1).all()

    # replay the same latents largest-first: the smaller detection now writes
    # the overlap last and owns it, the failure mode the ascending order avoids
    first = anonymize_image(
        frame, plan([large], latents=[derive_latent(0, 0)]), generators
    )
    descending = anonymize_image(
        first.image, plan([small], latents=[derive_latent(0, 1)]), generators
    )
    assert (descending.provenance[overlap] == 0).all()  # last writer is `small`
    assert not np.allclose(descending.image[overlap], ascending.image[overlap])
    outside = ~((large.anonymization_region > 0) | (small.anonymization_region > 0))
    assert np.array_equal(descending.image[outside], frame[outside])

    # with three stacked regions every overlap pixel still resolves to the
    # largest cover present there, under both synthesis and pixelation
    regions = [
        _rect_mask(frame_shape, 4, 4, 60, 44),
        _rect_mask(frame_shape, 12, 20, 52, 52),
        _rect_mask(frame_shape, 28, 28, 56, 60),
    ]
    dets = [_person(r, frame_shape, i) for i, r in enumerate(regions)]
    plan3 = plan(dets, seed=1)
    for result in (
        anonymize_image(frame, plan3, generators),
        anonymize_traditional(frame, plan3, "pixelate8"),
    ):
        coverages = np.array([d.coverage for d in dets])
        plan_order_of = {e["detection_index"]: e["order"] for e in result.audit}
        stack = np.stack([r > 0 for r in regions])
        covered = stack.any(axis=0)
        masked_cov = np.where(stack, coverages[:, None, None], -1)
        expected_owner = np.vectorize(plan_order_of.get)(masked_cov.argmax(axis=0))
        assert (result.provenance[covered] == expected_owner[covered]).all()
        assert (result.provenance[~covered] == -1).all()


# ---------------------------------------------------------------------------
# Tracking


def test_tracker_stability():
    """Tracking: 50-frame linear motion keeps one id and one latent; equal crops synthesize equal pixels"""
    frame_shape = (64, 160)
    pattern = np.random.default_rng(7).random((20, 12, 3)).astype(np.float32)
    tracker = Tracker(seed=0)

    per_frame = []
    for t in range(50):
        x0, y0 = 5 + 2 * t, 10
        region = _rect_mask(frame_shape, x0, y0, x0 + 12, y0 + 20)
        det = _person(region, frame_shape, 0)
        results = tracker.feed(t, [det])
        assert len(results) == 1
        per_frame.append(results[0])

    ids = {track_id for track_id, _, _ in per_frame}
    assert ids == {0}
    latent0 = per_frame[0][2]
    for _, _, latent in per_frame:
        assert np.array_equal(latent, latent0)

    # identical conditioning at two different frames: the synthetic identity
    # bound to the track must render the same pixels
    generator = small_generator()
    crops = []
    for t in (10, 40):
        frame = np.zeros((*frame_shape, 3), dtype=np.float32)
        x0, y0 = 5 + 2 * t, 10
        frame[y0 : y0 + 20, x0 : x0 + 12] = pattern
        _, det, latent = per_frame[t]
        crop = crop_for_detection(det, generator.config.input_resolution, frame_shape)
        image = crop.extract_image(frame)
        mask = 1.0 - crop.extract_mask(det.anonymization_region)
        crops.append((image, mask, latent))

    (img_a, mask_a, lat_a), (img_b, mask_b, lat_b) = crops
    assert np.array_equal(img_a, img_b) and np.array_equal(mask_a, mask_b)
    z = z_from_numpy(lat_a, generator.config)
    with torch.no_grad():
        out_a = generator.synthesize(
            torch.from_numpy(img_a.transpose(2, 0, 1))[None],
            torch.from_numpy(mask_a)[None, None],
            z,
        )
        out_b = generator.synthesize(
            torch.from_numpy(img_b.transpose(2, 0, 1))[None],
            torch.from_numpy(mask_b)[None, None],
            z_from_numpy(lat_b, generator.config),
        )
    assert torch.equal(out_a, out_b)


# ---------------------------------------------------------------------------
# Frechet distance


def test_frechet_closed_forms():
    """Frechet distance: identity 0 within 1e-10, unit mean shift 1.0 and diagonal form within 1e-8"""
    rng = np.random.default_rng(13)
    mu = rng.normal(size=6)
    root = rng.normal(size=(6, 6))
    sigma = root @ root.T + 1e-3 * np.eye(6)
    same = FeatureStatistics(mu=mu, sigma=sigma, n=128)
    assert abs(frechet_distance(same, same)) < 1e-10

    standard = FeatureStatistics(mu=np.zeros(1), sigma=np.eye(1), n=128)
    shifted = FeatureStatistics(mu=np.ones(1), sigma=np.eye(1), n=128)
    assert abs(frechet_distance(standard, shifted) - 1.0) < 1e-8

    a = rng.uniform(0.5, 2.0, size=8)
    b = rng.uniform(0.5, 2.0, size=8)
    mu_a, mu_b = rng.normal(size=8), rng.normal(size=8)
    closed = float(
        ((mu_a - mu_b) ** 2).sum() + (a + b - 2 * np.sqrt(a * b)).sum()
    )
    got = frechet_distance(
        FeatureStatistics(mu=mu_a, sigma=np.diag(a), n=128),
        FeatureStatistics(mu=mu_b, sigma=np.diag(b), n=128),
    )
    assert abs(got - closed) < 1e-8


# ---------------------------------------------------------------------------
# Re-identification ordering


FRAME_H, FRAME_W = 48, 40
RX0, RY0, RX1, RY1 = 4, 8, 36, 40
N_IDS = 20
A4, A2, A1 = 0.004, 0.01, 0.025
VIEW_NOISE = 0.15
BG_NOISE = 0.06


def _reid_protocol(run_seed):
    """Identity = a fixed multi-scale binary texture; views add independent
    pixel noise. Coarse texture survives coarse pixelation, fine texture only
    survives the original, so anonymization strength orders retrieval."""
    rng = np.random.default_rng(np.random.SeedSequence((run_seed, 0xA11)))
    rh, rw = RY1 - RY0, RX1 - RX0
    patterns = []
    for _ in range(N_IDS):
        c4 = rng.choice([-1.0, 1.0], size=(rh // 4, rw // 4))
        c2 = rng.choice([-1.0, 1.0], size=(rh // 2, rw // 2))
        c1 = rng.choice([-1.0, 1.0], size=(rh, rw))
        patterns.append(
            0.5
            + A4 * np.kron(c4, np.ones((4, 4)))
            + A2 * np.kron(c2, np.ones((2, 2)))
            + A1 * c1
        )

    def view(identity):
        frame = 0.5 + rng.uniform(-BG_NOISE, BG_NOISE, size=(FRAME_H, FRAME_W, 3))
        body = patterns[identity][:, :, None] + rng.normal(0.0, VIEW_NOISE, size=(rh, rw, 3))
        frame[RY0:RY1, RX0:RX1] = body
        return np.clip(frame, 0.0, 1.0).astype(np.float32)

    gallery = [(i, view(i)) for i in range(N_IDS) for _ in range(5)]
    queries = [(i, view(i)) for i in range(N_IDS) for _ in range(2)]
    return gallery, queries


def _reid_rank1(gallery, queries):
    extractor = IdentityExtractor()
    g_feats = extractor(np.stack([im.transpose(2, 0, 1) for _, im in gallery]))
    q_feats = extractor(np.stack([im.transpose(2, 0, 1) for _, im in queries]))
    g_ids = np.array([i for i, _ in gallery])
    q_ids = np.array([i for i, _ in queries])
    return evaluate_reid(q_feats, q_ids, g_feats, g_ids).rank1


def test_reid_ordering():
    """Re-id: retrieval orders original > pixelate16 > pixelate8 >= maskout ~= synthesis over 20 runs, p<0.05"""
    torch.manual_seed(0)
    generators = {
        "body": Generator(
            tiny_config(resolution=(FRAME_H, FRAME_W), n_downsamples=2,
                        base_channels=4, max_channels=8, z_dim=16, w_dim=16)
        ),
        "body_dense": None,
        "face": None,
    }
    generators["body"].eval()
    region = _rect_mask((FRAME_H, FRAME_W), RX0, RY0, RX1, RY1)
    det = _person(region, (FRAME_H, FRAME_W), 0)

    rows = {k: [] for k in ("original", "pixelate16", "pixelate8", "maskout", "gan")}
    for run in range(20):
        gallery, queries = _reid_protocol(run)
        rows["original"].append(_reid_rank1(gallery, queries))
        for mode in ("pixelate16", "pixelate8", "maskout"):
            anonymized = [
                (i, anonymize_traditional(im, plan([det]), mode).image)
                for i, im in gallery
            ]
            rows[mode].append(_reid_rank1(anonymized, queries))
        synthesized = [
            (i, anonymize_image(im, plan([det], seed=run * 1000 + k), generators).image)
            for k, (i, im) in enumerate(gallery)
        ]
        rows["gan"].append(_reid_rank1(synthesized, queries))

    arrays = {k: np.array(v) for k, v in rows.items()}
    for stronger, weaker in (
        ("original", "pixelate16"),
        ("pixelate16", "pixelate8"),
        ("pixelate8", "maskout"),
    ):
        t = scipy_stats.ttest_rel(arrays[stronger], arrays[weaker], alternative="greater")
        assert arrays[stronger].mean() > arrays[weaker].mean()
        assert t.pvalue < 0.05, (stronger, weaker, t.pvalue)
    assert abs(arrays["maskout"].mean() - arrays["gan"].mean()) < 0.05


# ---------------------------------------------------------------------------
# Latent editing


def test_latent_editing():
    """Editing: truncation scales center distance exactly, zero strength is an identity, brightness direction generalizes in 19/20 seeds"""
    rng = np.random.default_rng(17)
    w = rng.normal(size=(32, 16))
    centers = fit_centers(rng.normal(size=(200, 16)) * 3.0, k=4, seed=0)
    nearest = np.array([
        centers.centers[np.argmin(((centers.centers - v) ** 2).sum(axis=1))]
        for v in w
    ])
    for psi in (0.0, 0.25, 0.5, 0.9, 1.0):
        truncated = truncate(w, centers, psi)
        got = np.linalg.norm(truncated - nearest, axis=1)
        want = psi * np.linalg.norm(w - nearest, axis=1)
        assert np.abs(got - want).max() < 1e-9

    direction = EditDirection(name="probe", direction=rng.normal(size=16))
    out = apply_direction(w, direction, 0.0)
    assert out is not w and np.array_equal(out, w)

    wins = 0
    for seed in range(20):
        generator = small_generator(seed=seed)
        gen_rng = np.random.default_rng(seed)
        h, w_res = generator.config.input_resolution

        def context():
            image = torch.from_numpy(
                gen_rng.random((1, 3, h, w_res), dtype=np.float32)
            )
            mask = torch.ones(1, 1, h, w_res)
            mask[:, :, 8:24, 8:24] = 0.0
            z = torch.from_numpy(
                gen_rng.standard_normal((1, generator.config.z_dim)).astype(np.float32)
            )
            return {"image": image, "mask": mask, "z": z}

        train = [context() for _ in range(4)]
        held_out = [context() for _ in range(2)]
        found = find_global_direction(
            generator,
            brightness_scorer,
            "brighter",
            train,
            DirectionSearchConfig(steps=20, lr=0.05, strengths=(3.0,),
                                  drift_weight=0.0, seed=seed),
        )
        edited_mean, base_mean = 0.0, 0.0
        with torch.no_grad():
            for ctx in held_out:
                w_vec = generator.map_latent(ctx["z"])
                shifted = w_vec + 3.0 * torch.from_numpy(
                    found.direction.astype(np.float32)
                )
                base = generator(ctx["image"] * ctx["mask"], ctx["mask"], None, w=w_vec)
                edited = generator(ctx["image"] * ctx["mask"], ctx["mask"], None, w=shifted)
                base_mean += brightness_scorer(base).item()
                edited_mean += brightness_scorer(edited).item()
        if edited_mean > base_mean:
            wins += 1
    assert wins >= 19, wins


# ---------------------------------------------------------------------------
# Service


def test_service_determinism():
    """Service: same request renders byte-identical; resampling touches only the detection's own pixels"""
    frame_shape = (64, 80)
    region_a = _rect_mask(frame_shape, 5, 5, 25, 35)
    region_b = _rect_mask(frame_shape, 40, 20, 70, 60)
    dets = [_person(region_a, frame_shape, 0), _person(region_b, frame_shape, 1)]

    engine = Engine(
        detect=lambda image: dets,
        generators={"body": small_generator(), "body_dense": None, "face": None},
    )
    client = TestClient(create_app(engine))

    frame = np.random.default_rng(23).random((*frame_shape, 3)).astype(np.float32)
    png = encode_png(frame)
    created = client.post(
        "/sessions", files={"image": ("f.png", png, "image/png")}
    )
    assert created.status_code == 201
    session = created.json()["session_id"]

    body = {"mode": "gan", "seed": 5, "psi": 1.0, "edits": []}
    first = client.post(f"/sessions/{session}/anonymize", json=body).json()
    second = client.post(f"/sessions/{session}/anonymize", json=body).json()
    assert first["image_b64"] == second["image_b64"]

    import base64
    import cv2

    def decode(payload):
        raw = np.frombuffer(base64.b64decode(payload["image_b64"]), np.uint8)
        return cv2.cvtColor(cv2.imdecode(raw, cv2.IMREAD_COLOR), cv2.COLOR_BGR2RGB)

    base_render = decode(first)
    resampled = client.post(
        f"/sessions/{session}/detections/0/resample", json={"seed": 9}
    ).json()
    after = decode(resampled)
    changed = (after != base_render).any(axis=2)
    assert changed.any()
    assert not changed[region_a == 0].any()


# ---------------------------------------------------------------------------
# Training smoke (slowest: a real 2,000-step adversarial run)


SMOKE_RESOLUTION = (96, 64)


def _smoke_fid(generator, dataset, extractor):
    eval_idx = np.random.default_rng(123).integers(0, len(dataset), size=128)
    batch = dataset.batch(eval_idx)
    image_t, mask_t, _ = batch_to_tensors(batch)
    real = extractor(batch["image"])
    g = torch.Generator().manual_seed(7)
    fake = []
    with torch.no_grad():
        for lo in range(0, 128, 32):
            z = torch.randn(32, generator.config.z_dim, generator=g)
            out = generator.synthesize(image_t[lo : lo + 32], mask_t[lo : lo + 32], z)
            fake.append(extractor(out.numpy()))
    return frechet_from_features(real, np.concatenate(fake))


def _smoke_diversity(generator, dataset, n=10):
    image, mask, _ = batch_to_tensors(dataset.batch(np.array([17])))
    g = torch.Generator().manual_seed(11)
    outs = []
    with torch.no_grad():
        for _ in range(n):
            z = torch.randn(1, generator.config.z_dim, generator=g)
            outs.append(generator.synthesize(image, mask, z)[0].numpy())
    region = mask[0, 0].numpy() < 0.5
    pairs = [
        np.abs(outs[i][:, region] - outs[j][:, region]).mean()
        for i in range(n)
        for j in range(i + 1, n)
    ]
    return float(np.mean(pairs))


def test_training_smoke():
    """Training smoke: 2,000 steps at 96x64 stay finite, cut the Frechet gap by 30%, keep latent diversity"""
    start = time.monotonic()
    g_config = GeneratorConfig(
        input_resolution=SMOKE_RESOLUTION,
        condition="none",
        base_channels=16,
        max_channels=128,
        z_dim=64,
        w_dim=64,
    )
    t_config = TrainConfig(batch_size=8, steps=2000, seed=0)
    dataset = ToyFigureDataset(resolution=SMOKE_RESOLUTION, size=4096, seed=0)
    trainer = Trainer(g_config, t_config, dataset, out_dir=None)
    extractor = RandomProjectionExtractor(
        input_shape=(3, *SMOKE_RESOLUTION), dim=64, seed=0
    )

    fid_start = _smoke_fid(trainer.generator, dataset, extractor)
    history = trainer.train(2000)
    for row in history:
        for key in ("d_loss", "g_loss", "r1", "logit_real", "logit_fake"):
            assert np.isfinite(row[key]), (row["step"], key, row[key])

    fid_end = _smoke_fid(trainer.generator, dataset, extractor)
    assert fid_end <= 0.7 * fid_start, (fid_start, fid_end)

    diversity = _smoke_diversity(trainer.generator, dataset)
    assert diversity > 0.01, diversity
    assert time.monotonic() - start < 4 * 3600.0

import numpy as np
import pytest
import torch

from octaseg.backbone import (
    EncoderDescription,
    MaskPrediction,
    build_model,
    load_checkpoint,
    save_checkpoint,
    select_best,
)
from octaseg.dataio import GeometricTransform
from octaseg.promptgen import PromptPoint, PromptPointSet


def test_description_validation():
    with pytest.raises(ValueError):
        EncoderDescription(input_side=60, patch_size=8)
    with pytest.raises(ValueError):
        EncoderDescription(embed_dim=66, heads=4)
    d = EncoderDescription()
    assert d.grid == 8


def test_encode_image_shape_and_finiteness(tiny_model):
    lat = tiny_model.encode_image(np.zeros((64, 64, 3), dtype=np.float32))
    assert tuple(lat.shape) == (64, 64)  # grid^2 x d
    assert torch.isfinite(lat).all()


def test_encode_image_deterministic(tiny_model, rng):
    img = rng.random((64, 64, 3)).astype(np.float32)
    a = tiny_model.encode_image(img)
    b = tiny_model.encode_image(img)
    assert torch.equal(a, b)


def test_encode_image_shape_mismatch(tiny_model):
    with pytest.raises(ValueError):
        tiny_model.encode_image(np.zeros((32, 32, 3), dtype=np.float32))


def test_encode_prompts_polarity_distinct(tiny_model):
    tf = GeometricTransform.identity(64, 64)
    pos = tiny_model.encode_prompts(PromptPointSet(points=[PromptPoint(10, 10, 1)]), tf)
    neg = tiny_model.encode_prompts(PromptPointSet(points=[PromptPoint(10, 10, 0)]), tf)
    assert not torch.equal(pos.tokens, neg.tokens)


def test_encode_prompts_empty_gives_no_prompt_token(tiny_model):
    tf = GeometricTransform.identity(64, 64)
    emb = tiny_model.encode_prompts(PromptPointSet(), tf)
    assert emb.n_points == 0
    assert tuple(emb.tokens.shape) == (1, 64)
    # segmentation still defined on the no-prompt path
    lat = tiny_model.encode_image(np.zeros((64, 64, 3), dtype=np.float32))
    pred = tiny_model.decode_mask(lat, emb)
    assert torch.isfinite(pred.masks).all()


def test_encode_prompts_out_of_bounds(tiny_model):
    tf = GeometricTransform.identity(64, 64)
    with pytest.raises(ValueError) as err:
        tiny_model.encode_prompts(PromptPointSet(points=[PromptPoint(100, 10, 1)]), tf)
    assert "0" in str(err.value)  # offending index listed


def test_encode_prompts_maps_through_transform(tiny_model):
    # a 304x304-space point maps into the 64-encoder space under the resize transform
    tf = GeometricTransform(scale=64 / 304, src_w=304, src_h=304)
    emb = tiny_model.encode_prompts(PromptPointSet(points=[PromptPoint(152, 152, 1)]), tf)
    assert emb.n_points == 1
    mapped = tf.apply(np.array([152.0, 152.0]))
    assert 31 < mapped[0] < 33


def test_encode_prompts_duplicate_point_adds_token(tiny_model):
    tf = GeometricTransform.identity(64, 64)
    one = tiny_model.encode_prompts(PromptPointSet(points=[PromptPoint(9, 9, 1)]), tf)
    two = tiny_model.encode_prompts(
        PromptPointSet(points=[PromptPoint(9, 9, 1), PromptPoint(9, 9, 1)]), tf
    )
    assert two.n_points == one.n_points + 1
    assert two.tokens.shape[0] == 2
    assert torch.equal(two.tokens[0], two.tokens[1])  # identical point, identical embedding


def test_decode_mask_candidates_and_range(tiny_model, rng):
    img = rng.random((64, 64, 3)).astype(np.float32)
    lat = tiny_model.encode_image(img)
    emb = tiny_model.encode_prompts(
        PromptPointSet(points=[PromptPoint(5, 5, 1)]), GeometricTransform.identity(64, 64)
    )
    pred = tiny_model.decode_mask(lat, emb)
    assert pred.masks.shape[0] == tiny_model.description.num_mask_candidates
    masks = pred.masks.detach()
    assert float(masks.min()) >= 0.0 and float(masks.max()) <= 1.0
    assert torch.isfinite(pred.confidences).all()
    again = tiny_model.decode_mask(lat, emb)
    assert torch.equal(masks, again.masks.detach())


def test_decode_mask_width_mismatch(tiny_model):
    from octaseg.backbone import PromptEmbedding

    with pytest.raises(ValueError):
        tiny_model.decode_mask(torch.zeros(64, 32), PromptEmbedding(tokens=torch.zeros(1, 32), n_points=1))


def test_select_best_argmax_and_ties():
    masks = torch.rand(3, 8, 8)
    pred = MaskPrediction(masks=masks, confidences=torch.tensor([0.2, 0.9, 0.5]))
    best, conf = select_best(pred)
    assert conf == pytest.approx(0.9)
    assert torch.equal(best, masks[1])
    tie = MaskPrediction(masks=masks[:2], confidences=torch.tensor([0.7, 0.7]))
    best, conf = select_best(tie)
    assert torch.equal(best, masks[0])
    single = MaskPrediction(masks=masks[:1], confidences=torch.tensor([0.1]))
    best, _ = select_best(single)
    assert torch.equal(best, masks[0])


def test_select_best_monotone_invariance(rng):
    masks = torch.rand(4, 4, 4)
    conf = torch.tensor([0.1, 0.75, 0.3, 0.6])
    base, _ = select_best(MaskPrediction(masks=masks, confidences=conf))
    for f in (lambda x: 3 * x + 1, torch.exp, lambda x: x**3):
        best, _ = select_best(MaskPrediction(masks=masks, confidences=f(conf)))
        assert torch.equal(best, base)


def test_checkpoint_roundtrip(tmp_path, tiny_model, rng):
    img = rng.random((64, 64, 3)).astype(np.float32)
    before = tiny_model.encode_image(img)
    path = tmp_path / "model.ckpt"
    save_checkpoint(tiny_model, path)
    loaded = load_checkpoint(path)
    assert loaded.description == tiny_model.description
    after = loaded.encode_image(img)
    assert torch.equal(before, after)


def test_checkpoint_bad_file(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        load_checkpoint(bad)
    torch.save({"format_version": 999}, tmp_path / "v999.ckpt")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "v999.ckpt")


def test_variants_share_signatures():
    from octaseg.backbone import VARIANTS

    assert set(VARIANTS) == {"tiny", "full"}
    full = VARIANTS["full"]
    assert full.input_side == 1024
    assert full.input_side % full.patch_size == 0


def test_build_model_deterministic_seed(rng):
    a = build_model("tiny", seed=5)
    b = build_model("tiny", seed=5)
    img = rng.random((64, 64, 3)).astype(np.float32)
    assert torch.equal(a.encode_image(img), b.encode_image(img))
    c = build_model("tiny", seed=6)
    assert not torch.equal(a.encode_image(img), c.encode_image(img))
    with pytest.raises(ValueError):
        build_model("huge")

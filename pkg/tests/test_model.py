import numpy as np
import pytest
import torch

from m2se import model as m
from m2se.errors import ConfigError, MediaError, ShapeError, ValidationError

SMALL_ENCODER = m.EncoderConfig(d_vision=6, image_size=64, patch_size=32, seed=1,
                                max_frames=2)
SMALL = m.ModelConfig(d_model=16, n_heads=2, n_layers=2, max_len=96, seed=3,
                      encoder=SMALL_ENCODER)


@pytest.fixture(scope="module")
def toy_model():
    return m.ToyModel(SMALL)


def test_tokenizer_roundtrip_and_control_filtering():
    tok = m.ByteTokenizer()
    text = "negative, neutral, or positive? émoji"
    ids = tok.encode(text)
    assert all(0 <= i < 256 for i in ids)
    assert tok.decode(ids) == text
    assert tok.decode([m.BOS_ID] + ids + [m.SEP_ID, m.EOS_ID, m.PAD_ID]) == text
    assert m.VOCAB_SIZE == 260


def test_encoder_config_validation():
    assert m.EncoderConfig().patches_per_frame == 196  # 448/32 squared
    assert m.EncoderConfig().patch_dim == 32 * 32 * 3
    with pytest.raises(ConfigError):
        m.EncoderConfig(image_size=100, patch_size=32)
    with pytest.raises(ConfigError):
        m.EncoderConfig(d_vision=0)


def test_model_config_validation():
    with pytest.raises(ConfigError, match="cap of 64"):
        m.ModelConfig(d_model=128, n_heads=8)
    with pytest.raises(ConfigError):
        m.ModelConfig(d_model=30, n_heads=4)
    cfg = m.ModelConfig.from_dict(SMALL.to_dict())
    assert cfg == SMALL


def test_patch_encoder_is_seeded_and_frozen():
    enc1, enc2 = m.PatchEncoder(SMALL_ENCODER), m.PatchEncoder(SMALL_ENCODER)
    assert torch.equal(enc1.weight, enc2.weight)
    assert enc1.weight.requires_grad is False
    assert enc1.weight.dtype == torch.float64
    other = m.PatchEncoder(m.EncoderConfig(d_vision=6, image_size=64, patch_size=32, seed=2))
    assert not torch.equal(enc1.weight, other.weight)
    thawed = m.PatchEncoder(
        m.EncoderConfig(d_vision=6, image_size=64, patch_size=32, frozen=False))
    assert thawed.weight.requires_grad is True


def test_patchify_matches_manual_slices():
    enc = m.PatchEncoder(SMALL_ENCODER)
    rng = np.random.default_rng(0)
    frames = rng.random((2, 64, 64, 3))
    tokens = enc.encode_frames(frames, "synthetic")
    grid, p = 2, 32
    assert tokens.matrix.shape == (2 * grid * grid, 6)
    weight = enc.weight.detach().numpy()
    for f in range(2):
        for pr in range(grid):
            for pc in range(grid):
                row = (f * grid + pr) * grid + pc
                patch = frames[f, pr * p:(pr + 1) * p, pc * p:(pc + 1) * p, :].reshape(-1)
                manual = weight @ patch
                np.testing.assert_allclose(tokens.matrix[row].numpy(), manual,
                                           rtol=0, atol=1e-12)
    # zero frames map to zero tokens (bias-free embedding)
    zero = enc.encode_frames(np.zeros((1, 64, 64, 3)), "zero")
    assert torch.count_nonzero(zero.matrix) == 0
    with pytest.raises(ShapeError):
        enc.encode_frames(np.zeros((1, 32, 32, 3)), "small")


def test_encode_media_image_and_directory(tmp_path, toy_manifest):
    enc = m.PatchEncoder(SMALL_ENCODER)
    image = toy_manifest.parent / "media" / "s01.png"
    tokens = m.encode_media(image, enc)
    assert tokens.matrix.shape == (4, 6)  # one 64x64 frame, 2x2 patch grid
    assert torch.isfinite(tokens.matrix).all()

    frames_dir = tmp_path / "frames"
    frames_dir.mkdir()
    for name in ("a.png", "b.png", "c.png"):
        data = (toy_manifest.parent / "media" / "s01.png").read_bytes()
        (frames_dir / name).write_bytes(data)
    stacked = m.encode_media(frames_dir, enc)
    assert stacked.matrix.shape == (8, 6)  # capped at max_frames=2

    with pytest.raises(MediaError):
        m.encode_media(tmp_path / "nope.png", enc)
    empty = tmp_path / "empty"
    empty.mkdir()
    with pytest.raises(MediaError):
        m.encode_media(empty, enc)
    bad = tmp_path / "notes.txt"
    bad.write_text("hello")
    with pytest.raises(MediaError):
        m.encode_media(bad, enc)


def test_encode_media_npy_variants(tmp_path):
    enc = m.PatchEncoder(SMALL_ENCODER)

    pre = tmp_path / "tokens.npy"
    np.save(pre, np.ones((5, 6)))
    assert m.encode_media(pre, enc).matrix.shape == (5, 6)
    np.save(pre, np.ones((5, 7)))
    with pytest.raises(ShapeError, match="d_vision"):
        m.encode_media(pre, enc)

    one = tmp_path / "frame.npy"
    np.save(one, np.zeros((64, 64, 3)))
    assert m.encode_media(one, enc).matrix.shape == (4, 6)

    stack = tmp_path / "clip.npy"
    np.save(stack, np.zeros((6, 64, 64, 3), dtype=np.uint8))
    assert m.encode_media(stack, enc).matrix.shape == (8, 6)  # 6 frames -> 2

    weird = tmp_path / "weird.npy"
    np.save(weird, np.zeros((2, 2, 2, 2, 2)))
    with pytest.raises(MediaError, match="rank"):
        m.encode_media(weird, enc)


def test_init_is_seed_deterministic():
    a, b = m.ToyModel(SMALL), m.ToyModel(SMALL)
    for (name, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(pa, pb), name
    other = m.ToyModel(m.ModelConfig(d_model=16, n_heads=2, n_layers=2, max_len=96,
                                     seed=4, encoder=SMALL_ENCODER))
    assert not torch.equal(a.head.weight, other.head.weight)
    # layer norms start as identity, vision comes from the encoder seed
    assert torch.equal(a.final_norm.weight, torch.ones(16, dtype=torch.float64))
    assert torch.equal(a.vision.weight, m.PatchEncoder(SMALL_ENCODER).weight)


def test_project_matches_triple_loop(toy_model):
    rng = np.random.default_rng(5)
    tv = m.VisualTokens(torch.from_numpy(rng.standard_normal((7, 6))), "x")
    projected = m.project(tv, toy_model).matrix
    w = toy_model.projection_matrix.detach().numpy()  # d_vision x d_model
    manual = np.zeros((7, 16))
    for i in range(7):
        for j in range(16):
            for k in range(6):
                manual[i, j] += tv.matrix[i, k].item() * w[k, j]
    np.testing.assert_allclose(projected.detach().numpy(), manual, rtol=0, atol=1e-12)
    with pytest.raises(ShapeError, match="expects 6"):
        m.project(m.VisualTokens(torch.zeros(3, 9, dtype=torch.float64), "x"), toy_model)


def test_fuse_boundary_and_split(toy_model):
    text = toy_model.embed_text([m.BOS_ID, 104, 105, m.SEP_ID])
    visual = m.ProjectedTokens(torch.arange(32, dtype=torch.float64).reshape(2, 16))
    fused = m.fuse(visual, text)
    assert fused.boundary == 2
    assert fused.matrix.shape == (6, 16)
    front, back = fused.split()
    assert torch.equal(front, visual.matrix)
    assert torch.equal(back, text.matrix)

    no_media = m.fuse(None, text)
    assert no_media.boundary == 0
    assert torch.equal(no_media.matrix, text.matrix)

    with pytest.raises(ShapeError, match="width"):
        m.fuse(m.ProjectedTokens(torch.zeros(2, 5, dtype=torch.float64)), text)


def test_embed_text_and_sequence_guards(toy_model):
    with pytest.raises(ShapeError):
        toy_model.embed_text([])
    with pytest.raises(ValidationError):
        toy_model.embed_text([0, 260])
    with pytest.raises(ShapeError, match="max_len"):
        toy_model.hidden_states(torch.zeros(97, 16, dtype=torch.float64))
    out = toy_model.logits(torch.zeros(4, 16, dtype=torch.float64))
    assert out.shape == (4, m.VOCAB_SIZE)
    assert out.dtype == torch.float64


def test_greedy_decode_is_deterministic(toy_model):
    fused = m.prompt_fused(toy_model, "hello", None)
    decode = m.DecodeConfig(max_new_tokens=12)
    first = m.forward(fused, toy_model, decode)
    second = m.forward(m.prompt_fused(toy_model, "hello", None), toy_model, decode)
    assert first == second
    assert m.forward(fused, toy_model, m.DecodeConfig(max_new_tokens=0)) == ""
    sampled = m.DecodeConfig(max_new_tokens=12, greedy=False, temperature=0.8, seed=11)
    assert m.forward(fused, toy_model, sampled) == m.forward(fused, toy_model, sampled)


def test_adapters_preserve_function_until_trained():
    plain = m.ToyModel(SMALL)
    probe = torch.randn(5, 16, generator=torch.Generator().manual_seed(0),
                        dtype=torch.float64)
    before = plain.logits(probe)
    adapted = m.apply_adapters(m.ToyModel(SMALL), r=4, alpha=16.0)
    after = adapted.logits(probe)
    assert torch.equal(before, after)  # zero-init second factor, bit-exact


def test_adapter_freezing_and_counts():
    model = m.apply_adapters(m.ToyModel(SMALL), r=4, alpha=16.0)
    for name, param in model.named_parameters():
        if name.startswith(("vision.",)):
            assert not param.requires_grad, name
        elif name.startswith("projector.") or ".lora_" in name:
            assert param.requires_grad, name
        else:
            assert not param.requires_grad, name
    counted = m.adapter_parameter_count(model)
    assert counted == m.expected_adapter_parameters(model, r=4)
    manual = 0
    for module in model.modules():
        if isinstance(module, m.LoRALinear):
            manual += 4 * (module.in_features + module.out_features)
    assert counted == manual
    projector_params = sum(p.numel() for p in model.projector.parameters())
    assert m.trainable_parameter_count(model) == counted + projector_params


def test_adapter_target_subset_and_errors():
    model = m.apply_adapters(m.ToyModel(SMALL), r=2, alpha=8.0, targets=("q", "v"))
    assert isinstance(model.blocks[0].attn.q, m.LoRALinear)
    assert not isinstance(model.blocks[0].attn.k, m.LoRALinear)
    assert not isinstance(model.head, m.LoRALinear)
    assert m.adapter_parameter_count(model) == m.expected_adapter_parameters(
        model, r=2, targets=("q", "v"))
    with pytest.raises(ConfigError, match="unknown adapter targets"):
        m.apply_adapters(m.ToyModel(SMALL), targets=("q", "gate"))
    with pytest.raises(ConfigError, match="rank"):
        m.apply_adapters(m.ToyModel(SMALL), r=0)
    with pytest.raises(ConfigError, match="exceeds min"):
        m.apply_adapters(m.ToyModel(SMALL), r=32)


def test_prepare_example_and_masked_loss(toy_model):
    visual = m.ProjectedTokens(torch.zeros(3, 16, dtype=torch.float64))
    example = m.prepare_example(toy_model, "ab", "c", visual)
    assert example.token_ids == [m.BOS_ID, 97, 98, m.SEP_ID, 99, m.EOS_ID]
    assert example.response_start == 4
    assert example.fused.boundary == 3

    loss = m.example_loss(toy_model, example)
    logits = toy_model.logits(example.fused.matrix)
    manual = torch.nn.functional.cross_entropy(
        logits[[3 + 3, 3 + 4]], torch.tensor([99, m.EOS_ID]))
    assert torch.equal(loss, manual)
    assert loss.item() > 0

    with pytest.raises(ShapeError, match="max_len"):
        m.prepare_example(toy_model, "x" * 200, "y", None)


def test_checkpoint_roundtrip(tmp_path):
    model = m.apply_adapters(m.ToyModel(SMALL), r=4, alpha=16.0, targets=("q", "head"))
    with torch.no_grad():
        model.head.lora_b.add_(0.5)  # make the adapters matter
    probe = torch.randn(4, 16, generator=torch.Generator().manual_seed(1),
                        dtype=torch.float64)
    path = tmp_path / "model.pt"
    m.save_checkpoint(path, model,
                      adapter_info={"r": 4, "alpha": 16.0, "targets": ["q", "head"]})
    loaded = m.load_checkpoint(path)
    assert isinstance(loaded.head, m.LoRALinear)
    assert torch.equal(loaded.logits(probe), model.logits(probe))

    payload = torch.load(path, weights_only=False)
    payload["format_version"] = 99
    torch.save(payload, tmp_path / "future.pt")
    with pytest.raises(ConfigError, match="format_version"):
        m.load_checkpoint(tmp_path / "future.pt")

import json

import numpy as np
import pytest
import torch

from ditracker import dit
from ditracker.dit import DiTConfig, VideoDiT

SMALL = DiTConfig(layers=3, heads=2, d_head=8, d_video=8, extract_layer=2, extract_head=1)


def small_model(seed=0, cfg=SMALL):
    torch.manual_seed(seed)
    return VideoDiT(cfg).eval()


def video(F=4, H=16, W=24, seed=0):
    return torch.rand(1, F, 3, H, W, generator=torch.Generator().manual_seed(seed))


def test_config_validation():
    with pytest.raises(ValueError):
        DiTConfig(layers=2, extract_layer=3).validate()
    with pytest.raises(ValueError):
        DiTConfig(heads=2, extract_head=2).validate()
    assert DiTConfig().d_model == 128


def test_encode_frames_shapes_and_frame_independence():
    m = small_model()
    v = video(F=5)
    z = dit.encode_frames(v, m)
    assert z.shape == (1, 5, 4, 6, 8)
    full = VideoDiT(DiTConfig())
    assert dit.encode_frames(torch.rand(1, 12, 3, 64, 96), full).shape == (1, 12, 16, 24, 16)
    same = v.clone()
    same[:, 1] = same[:, 0]
    zs = dit.encode_frames(same, m)
    assert torch.equal(zs[:, 0], zs[:, 1])
    perm = torch.tensor([3, 0, 4, 1, 2])
    assert torch.equal(dit.encode_frames(v[:, perm], m), z[:, perm])
    with pytest.raises(ValueError):
        dit.encode_frames(torch.rand(1, 2, 3, 18, 24), m)


def test_patch_encoder_fit_whitens():
    m = small_model()
    v = torch.rand(3, 4, 3, 16, 24, generator=torch.Generator().manual_seed(1))
    m.encoder.fit(v)
    z = dit.encode_frames(v, m).reshape(-1, 8).double()
    assert z.mean(0).abs().max() < 1e-4
    cov = torch.cov(z.T)
    torch.testing.assert_close(cov, torch.eye(8, dtype=cov.dtype), atol=1e-2, rtol=0)


def test_extract_qk_shape_determinism_and_range():
    m = small_model()
    z = dit.encode_frames(video(), m)
    a = dit.extract_qk(z, m, 2, 1)
    b = dit.extract_qk(z, m, 2, 1)
    assert a.Q.shape == a.K.shape == (1, 4, 4, 6, 8)
    assert torch.equal(a.Q, b.Q) and torch.equal(a.K, b.K)
    with pytest.raises(ValueError):
        dit.extract_qk(z, m, 4, 0)
    with pytest.raises(ValueError):
        dit.extract_qk(z, m, 1, 2)


def test_full_3d_attention_couples_frames():
    m = small_model()
    z = dit.encode_frames(video(), m).double()
    m = m.double()
    base = dit.extract_qk(z, m, 2, 0)
    z2 = z.clone()
    z2[0, 3, 1, 2, 0] += 1e-3
    moved = dit.extract_qk(z2, m, 2, 0)
    assert (moved.Q[0, 0] - base.Q[0, 0]).abs().max() > 0
    assert (moved.K[0, 1] - base.K[0, 1]).abs().max() > 0


def test_lora_identity_and_parameter_count():
    m = small_model()
    z = dit.encode_frames(video(), m)
    ref = dit.extract_qk(z, m, 3, 0)
    out_ref = m(z, torch.tensor([0.3]))
    dit.attach_lora(m, rank=4, up_to_layer=2)
    got = dit.extract_qk(z, m, 3, 0)
    assert (got.Q - ref.Q).abs().max() < 1e-6 and (got.K - ref.K).abs().max() < 1e-6
    assert (m(z, torch.tensor([0.3])) - out_ref).abs().max() < 1e-6
    trainable = sum(p.numel() for p in m.parameters() if p.requires_grad)
    assert trainable == 2 * 4 * 2 * SMALL.d_model * 4
    assert trainable == sum(p.numel() for p in dit.lora_parameters(m))


def test_lora_rank_bounds():
    dit.attach_lora(VideoDiT(DiTConfig()), rank=128, up_to_layer=4)
    with pytest.raises(ValueError):
        dit.attach_lora(VideoDiT(DiTConfig()), rank=129, up_to_layer=4)
    with pytest.raises(ValueError):
        dit.attach_lora(VideoDiT(DiTConfig()), rank=0, up_to_layer=4)


def test_lora_training_leaves_base_untouched():
    m = small_model()
    dit.attach_lora(m, rank=2, up_to_layer=2)
    before = dit.base_state(m)
    opt = torch.optim.SGD(dit.lora_parameters(m), lr=0.1)
    z = dit.encode_frames(video(), m)
    q = dit.extract_qk(z, m, 2, 0).Q
    q.square().mean().backward()
    opt.step()
    after = dit.base_state(m)
    assert all(torch.equal(before[k], after[k]) for k in before)
    assert any(p.abs().sum() > 0 for n, p in m.named_parameters() if n.endswith(".B"))


def test_chunk_plan_bookkeeping():
    assert dit.chunk_plan(10, 4) == [[0, 1, 2, 3], [0, 4, 5, 6, 7], [0, 8, 9]]
    assert dit.chunk_plan(5, 8) == [[0, 1, 2, 3, 4]]
    with pytest.raises(ValueError):
        dit.chunk_plan(5, 1)


def test_chunked_extract_equivalence_and_anchor():
    m = small_model()
    v = video(F=7)
    whole = dit.extract_qk(dit.encode_frames(v, m), m, m.cfg.extract_layer, m.cfg.extract_head)
    for c in (7, 9):
        got = dit.chunked_extract(v, m, c)
        assert torch.equal(got.Q, whole.Q) and torch.equal(got.K, whole.K)
    chunked = dit.chunked_extract(v, m, 3)
    assert chunked.Q.shape == whole.Q.shape
    first = dit.extract_qk(dit.encode_frames(v[:, :3], m), m, m.cfg.extract_layer, m.cfg.extract_head)
    assert torch.equal(chunked.Q[:, 0], first.Q[:, 0])
    assert torch.equal(chunked.Q[:, :3], first.Q)
    second = dit.extract_qk(dit.encode_frames(v[:, [0, 3, 4, 5]], m), m, m.cfg.extract_layer, m.cfg.extract_head)
    assert torch.equal(chunked.K[:, 3:6], second.K[:, 1:])


def test_flow_matching_pair_endpoints_and_optimum():
    z0, eps = torch.randn(2, 3, 4, 6, 8), torch.randn(2, 3, 4, 6, 8)
    zt, target = dit.flow_matching_pair(z0, eps, torch.tensor([0.0, 1.0]))
    assert torch.equal(zt[0], z0[0]) and torch.equal(zt[1], eps[1])
    assert torch.equal(target, eps - z0)

    class Oracle(torch.nn.Module):
        def forward(self, zt, t):
            return eps - z0

    assert dit.flow_matching_loss(Oracle(), z0, eps, torch.rand(2)) == 0


def test_pretraining_reduces_heldout_loss():
    torch.manual_seed(0)
    m = VideoDiT(SMALL)
    vids = torch.rand(12, 4, 3, 16, 24, generator=torch.Generator().manual_seed(2))
    m.encoder.fit(vids)
    lat = dit.encode_corpus(m, vids)
    res = dit.pretrain_flow_matching(m, lat[2:], steps=60, batch_size=4, lr=1e-3, holdout=lat[:2], log_every=20)
    assert len(res.loss_curve) == 3
    assert res.holdout_after < res.holdout_before
    with pytest.raises(ValueError):
        dit.pretrain_flow_matching(m, lat[:0], steps=1)


def test_checkpoint_round_trip(tmp_path):
    m = small_model()
    m.encoder.fit(video())
    dit.save_dit(m, tmp_path, seed=3, steps=10, corpus="abc")
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["seed"] == 3 and manifest["steps"] == 10 and manifest["corpus_hash"] == "abc"
    assert manifest["config"]["extract_layer"] == 2
    back = dit.load_dit(tmp_path).eval()
    z = dit.encode_frames(video(), back)
    assert torch.equal(z, dit.encode_frames(video(), m))
    assert torch.equal(back(z, torch.tensor([0.5])), m(z, torch.tensor([0.5])))
    with pytest.raises(FileNotFoundError):
        dit.load_dit(tmp_path / "missing")


def test_corpus_hash_is_content_based():
    a = np.zeros((2, 3), np.float32)
    assert dit.corpus_hash(a) == dit.corpus_hash(a.copy())
    assert dit.corpus_hash(a) != dit.corpus_hash(a + 1)

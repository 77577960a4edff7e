import numpy as np
import pytest
import torch

from conftest import micro_tracker, randomise
from ditracker.dit import video_to_tensor
from ditracker.numerics import fourier_encode_torch
from ditracker.refiner import (
    RefinerHead,
    TrackEstimate,
    assemble_tokens,
    init_tracks,
    load_tracker,
    read_predictions,
    refine_step,
    save_tracker,
    track,
    write_predictions,
)

QUERIES = np.array([[0, 5.0, 6.0], [1, 17.5, 9.25], [2, 11.0, 3.0]], dtype=np.float32)


def test_init_tracks_broadcast():
    est = init_tracks(torch.tensor([[0.0, 10.0, 20.0]]), 5)
    assert est.P.shape == (1, 1, 5, 2)
    assert torch.all(est.P == torch.tensor([10.0, 20.0]))
    assert torch.all(torch.sigmoid(est.V) == 0.5) and torch.all(est.C == 0)
    assert est.iteration == 0
    assert init_tracks(torch.tensor([[0.0, 1.0, 2.0]]), 1).P.shape == (1, 1, 1, 2)
    with pytest.raises(ValueError):
        init_tracks(torch.tensor([[5.0, 1.0, 2.0]]), 5)


def test_assemble_tokens_layout():
    est = init_tracks(torch.tensor([[0.0, 3.0, 4.0]]), 4)
    emb = torch.randn(1, 1, 4, 128)
    tok = assemble_tokens(est, emb)
    assert tok.shape[-1] == 2 * 34 + 2 + 128
    zero = fourier_encode_torch(torch.zeros(2))
    assert torch.equal(tok[0, 0, :, :34], zero.expand(4, 34))
    assert torch.equal(tok[0, 0, :, 34:68], zero.expand(4, 34))
    with pytest.raises(ValueError):
        assemble_tokens(est, emb[:, :, :3])


def test_assemble_tokens_boundaries():
    P = torch.tensor([[[[0.0, 0.0], [1.0, 2.0], [4.0, 2.0]]]])
    z = torch.zeros(1, 1, 3)
    tok = assemble_tokens(TrackEstimate(P, z, z, 0), torch.zeros(1, 1, 3, 8))
    enc = fourier_encode_torch
    assert torch.equal(tok[0, 0, 0, :34], enc(torch.zeros(2)))
    assert torch.equal(tok[0, 0, 1, :34], enc(torch.tensor([1.0, 2.0]) / 128))
    assert torch.equal(tok[0, 0, 1, 34:68], enc(torch.tensor([3.0, 0.0]) / 128))
    assert torch.equal(tok[0, 0, 2, 34:68], enc(torch.zeros(2)))


def test_refiner_zero_head_and_permutation_equivariance():
    torch.manual_seed(0)
    head = RefinerHead(20, width=16, heads=2, blocks=2).double()
    tok = torch.randn(1, 5, 4, 20, dtype=torch.float64)
    dP, dV, dC = refine_step(tok, head)
    assert dP.abs().max() == 0 and dV.abs().max() == 0 and dC.abs().max() == 0
    randomise(head)
    dP, dV, dC = refine_step(tok, head)
    perm = torch.tensor([3, 0, 4, 2, 1])
    pP, pV, pC = refine_step(tok[:, perm], head)
    torch.testing.assert_close(pP, dP[:, perm], atol=1e-6, rtol=0)
    torch.testing.assert_close(pV, dV[:, perm], atol=1e-6, rtol=0)
    torch.testing.assert_close(pC, dC[:, perm], atol=1e-6, rtol=0)
    single = refine_step(tok[:, :1], head)
    assert single[0].shape == (1, 1, 4, 2)


def test_untrained_tracker_returns_broadcast(micro_video):
    tr = micro_tracker()
    for T in (1, 3):
        out = track(micro_video, tr, QUERIES, iters=T)
        assert out["xy_iters"].shape == (T, 3, 3, 2)
        np.testing.assert_array_equal(out["xy"], np.broadcast_to(QUERIES[:, None, 1:], (3, 3, 2)))
        np.testing.assert_array_equal(out["vis"], 0.5)


def test_single_iteration_is_one_refine_step(micro_video):
    tr = micro_tracker()
    randomise(tr)
    v = video_to_tensor(micro_video)
    q = torch.as_tensor(QUERIES)[None]
    hist = tr(v, q, iters=1)
    feats = tr.features(v)
    est = init_tracks(q, 3)
    vol = tr.costs(feats, q, est.P, {})
    from ditracker.matching import embed_costs

    dP, dV, dC = refine_step(assemble_tokens(est, embed_costs(vol, tr.cost_mlp)), tr.refiner)
    torch.testing.assert_close(hist[0].P, est.P + dP)
    torch.testing.assert_close(hist[0].V, dV)


def test_resampling_follows_updates(micro_video):
    tr = micro_tracker()
    randomise(tr, scale=0.3)
    seen = []
    hist = tr(video_to_tensor(micro_video), torch.as_tensor(QUERIES)[None], iters=3,
              on_sample=lambda it, P: seen.append(P))
    assert len(seen) == 3
    for t in range(2):
        assert torch.equal(seen[t + 1], hist[t].P.detach())
    assert not torch.equal(seen[0], seen[1])


def test_tracker_determinism_and_errors(micro_video):
    tr = micro_tracker()
    randomise(tr)
    a = track(micro_video, tr, QUERIES)
    b = track(micro_video, tr, QUERIES)
    assert a["xy"].tobytes() == b["xy"].tobytes()
    assert np.all((a["vis"] >= 0) & (a["vis"] <= 1))
    with pytest.raises(ValueError):
        track(micro_video, tr, np.zeros((0, 3)))
    with pytest.raises(ValueError):
        tr(video_to_tensor(micro_video), torch.as_tensor(QUERIES)[None], iters=0)


@pytest.mark.parametrize("fusion", ["none", "feature_concat", "cost_sum", "cost_concat"])
def test_all_fusion_modes_run(micro_video, fusion):
    tr = micro_tracker(fusion=fusion, use_lora=fusion != "none")
    out = track(micro_video, tr, QUERIES)
    assert out["xy"].shape == (3, 3, 2)
    per_scale = 9 * 9 * (2 if fusion == "cost_concat" else 1)
    assert tr.cost_mlp.in_dim == 2 * per_scale


def test_predictions_file_round_trip(tmp_path, micro_video):
    tr = micro_tracker()
    randomise(tr)
    out = track(micro_video, tr, QUERIES)
    p = write_predictions(tmp_path / "tracks_pred.jsonl", QUERIES, out)
    recs = read_predictions(p)
    assert [r["id"] for r in recs] == [0, 1, 2]
    assert set(recs[0]) == {"id", "query", "xy", "vis", "conf"}
    assert recs[1]["query"] == [1, 17.5, 9.25]
    np.testing.assert_allclose(np.asarray(recs[2]["xy"]), out["xy"][2], atol=1e-4)


def test_tracker_checkpoint_round_trip(tmp_path, micro_video):
    tr = micro_tracker()
    randomise(tr)
    save_tracker(tr, tmp_path / "ck", seed=1, steps=5)
    back = load_tracker(tmp_path / "ck")
    a, b = track(micro_video, tr, QUERIES), track(micro_video, back, QUERIES)
    assert a["xy"].tobytes() == b["xy"].tobytes()
    with pytest.raises(FileNotFoundError):
        load_tracker(tmp_path / "nope")

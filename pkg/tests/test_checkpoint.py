import numpy as np
import pytest

from weakbox_kit.checkpoint import MAGIC, Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from weakbox_kit.nets import NetConfig, ParamStore, init_params
from weakbox_kit.optim import AdamW


def small_store():
    store = ParamStore()
    rng = np.random.default_rng(0)
    store.add("a.w", rng.normal(0, 1, (2, 3)).astype(np.float32))
    store.add("a.b", rng.normal(0, 1, (3,)).astype(np.float32))
    store.add("enc.w", rng.normal(0, 1, (4,)).astype(np.float32), frozen=True)
    store.add_stat("a.bn.running_mean", rng.normal(0, 1, (3,)).astype(np.float32))
    return store


def test_save_load_roundtrip(tmp_path):
    store = small_store()
    opt = AdamW(store, lr=1e-3)
    # one fake step so optimizer state is non-trivial
    for _, t in store.trainable():
        t.grad = np.ones_like(t.data)
    opt.step()
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, store, "adamw", opt.state_dict(), seed=42, epoch=7)
    ck = load_checkpoint(path)
    assert ck.epoch == 7 and ck.seed == 42 and ck.optimizer_kind == "adamw"
    for name, t in store.tensors.items():
        assert np.array_equal(ck.tensors[name], t.data)
        assert ck.frozen(name) == t.frozen
    assert np.array_equal(ck.stats["a.bn.running_mean"], store.stats["a.bn.running_mean"])
    assert ck.optimizer_state["step"] == 1
    assert np.array_equal(ck.optimizer_state["m"]["a.w"], opt.m["a.w"])


def test_save_load_save_byte_identical(tmp_path):
    store = small_store()
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(p1, store, "adamw", None, seed=1, epoch=2)
    ck = load_checkpoint(p1)
    save_checkpoint(p2, ck.build_params(), ck.optimizer_kind, ck.optimizer_state, seed=ck.seed, epoch=ck.epoch)
    assert p1.read_bytes() == p2.read_bytes()


def test_wrong_magic_rejected(tmp_path):
    path = tmp_path / "bad.ckpt"
    store = small_store()
    save_checkpoint(path, store)
    blob = bytearray(path.read_bytes())
    blob[:4] = b"NOPE"
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_version_mismatch_rejected(tmp_path):
    path = tmp_path / "v.ckpt"
    save_checkpoint(path, small_store())
    blob = bytearray(path.read_bytes())
    blob[4:8] = (99).to_bytes(4, "little")
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_truncation_rejected(tmp_path):
    path = tmp_path / "t.ckpt"
    save_checkpoint(path, small_store())
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) - 5])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_trailing_data_rejected(tmp_path):
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, small_store())
    path.write_bytes(path.read_bytes() + b"\x00\x00")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(path)


def test_name_filter_saves_subset(tmp_path):
    params = init_params(3, NetConfig())
    path = tmp_path / "refine.ckpt"
    save_checkpoint(path, params, name_filter=lambda n: n.startswith("refine."))
    ck = load_checkpoint(path)
    assert ck.tensors and all(n.startswith("refine.") for n in ck.tensors)
    assert all(n.startswith("refine.") for n in ck.stats)


def test_merge_into_respects_prefix_and_frozen(tmp_path):
    donor = init_params(4, NetConfig())
    path = tmp_path / "r.ckpt"
    save_checkpoint(path, donor, name_filter=lambda n: n.startswith("refine."))
    target = init_params(5, NetConfig(), include_refine=False)
    assert "refine.out.w" not in target.tensors
    load_checkpoint(path).merge_into(target, "refine.", frozen=True)
    assert "refine.out.w" in target.tensors
    assert target["refine.out.w"].frozen
    assert not target["refine.out.w"].requires_grad
    assert np.array_equal(target["refine.out.w"].data, donor["refine.out.w"].data)


def test_magic_constant():
    assert MAGIC == b"BSWK"

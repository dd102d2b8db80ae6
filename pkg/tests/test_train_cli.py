import dataclasses
import json

import numpy as np
import pytest

from swinvox import cli
from swinvox.checkpoint import Checkpoint, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from swinvox.config import RunConfig, TrainConfig, dump_config, load_config, parse_config
from swinvox.data import load_voxels, load_voxels_float, make_dataset, make_sample, save_image, save_voxels
from swinvox.decoder import DecoderConfig
from swinvox.encoder import EncoderConfig
from swinvox.errors import ConfigError, FingerprintMismatch, FormatError, PoisonedGradientError
from swinvox.export import read_loss_curve, voxels_to_obj
from swinvox.tensor import ops
from swinvox.train import Trainer, evaluate, reconstruct, report_from_predictions, train

TINY_ENC = EncoderConfig(image_size=32, patch_size=4, embed_dim=8, heads=(1, 2, 2, 4), window_size=2)
TINY_DEC = DecoderConfig(seed_channels=4, channels=(4, 4, 2))

TINY_TEXT = """\
[encoder]
image_size = 32
patch_size = 4
embed_dim = 8
heads = 1,2,2,4
window_size = 2

[decoder]
seed_channels = 4
channels = 4,4,2

[train]
batch_size = 2
epochs = 1
lr = 1e-3
dataset = {dataset}
"""


def tiny_run(**train):
    base = dict(lr=1e-3, batch_size=2)
    base.update(train)
    return RunConfig(TINY_ENC, TINY_DEC, TrainConfig(**base))


@pytest.fixture(scope="module")
def samples():
    return [make_sample(f"s{i}", 3, i, image_size=32) for i in range(4)]


def arrays_of(samples, n):
    return np.stack([s.image for s in samples[:n]]), np.stack([s.voxels for s in samples[:n]])


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    make_dataset(root, 10, seed=4, image_size=32)
    return root


# ------------------------------------------------------------ trainer


def test_loss_decreases_on_two_samples(samples):
    tr = Trainer(tiny_run(), *arrays_of(samples, 2))
    first = tr.train_step()
    for _ in range(199):
        last = tr.train_step()
    assert last < first
    assert tr.step == 200 and len(tr.losses) == 200


def test_zero_lr_leaves_params_unchanged(samples):
    tr = Trainer(tiny_run(lr=0.0), *arrays_of(samples, 2))
    before = {k: v.data.copy() for k, v in tr.model.params.items()}
    for _ in range(3):
        tr.train_step()
    assert all(np.array_equal(before[k], v.data) for k, v in tr.model.params.items())


def test_runs_are_deterministic_and_resume_exactly(samples):
    images, voxels = arrays_of(samples, 4)
    a = Trainer(tiny_run(), images, voxels)
    b = Trainer(tiny_run(), images, voxels)
    for _ in range(6):
        a.train_step()
        b.train_step()
    assert encode_checkpoint(a.checkpoint()) == encode_checkpoint(b.checkpoint())

    c = Trainer(tiny_run(), images, voxels)
    for _ in range(3):
        c.train_step()
    resumed = Trainer.from_checkpoint(decode_checkpoint(encode_checkpoint(c.checkpoint())), images, voxels)
    for _ in range(3):
        resumed.train_step()
    assert encode_checkpoint(resumed.checkpoint()) == encode_checkpoint(a.checkpoint())
    assert [x for _, x in resumed.losses] == [x for _, x in a.losses[3:]]


def test_other_seed_differs(samples):
    images, voxels = arrays_of(samples, 2)
    a = Trainer(tiny_run(seed=0), images, voxels)
    b = Trainer(tiny_run(seed=1), images, voxels)
    assert not np.array_equal(a.model.params["dec.head.weight"].data, b.model.params["dec.head.weight"].data)


def test_batches_cover_each_epoch(samples):
    tr = Trainer(tiny_run(batch_size=3), *arrays_of(samples, 4))
    assert tr.steps_per_epoch == 2
    for epoch in range(3):
        seen = np.concatenate([tr.batch_indices(epoch * 2 + k) for k in range(2)])
        assert sorted(seen) == [0, 1, 2, 3]


def test_float64_training(samples):
    tr = Trainer(tiny_run(), *arrays_of(samples, 2), dtype=np.float64)
    tr.train_step()
    ckpt = decode_checkpoint(encode_checkpoint(tr.checkpoint()))
    assert all(v.dtype == np.float64 for v in ckpt.params.values())
    assert ckpt.model().params["dec.head.bias"].dtype == np.float64


def test_poisoned_gradient_halts(samples, monkeypatch):
    tr = Trainer(tiny_run(), *arrays_of(samples, 2))
    monkeypatch.setattr(ops, "_sigmoid_grad", lambda out: out * np.nan)
    with pytest.raises(PoisonedGradientError) as exc:
        tr.train_step()
    assert exc.value.step == 0 and tr.step == 0


def test_trainer_rejects_wrong_image_size(samples):
    images, voxels = arrays_of(samples, 2)
    with pytest.raises(ConfigError):
        Trainer(tiny_run(), images[:, :, :16, :16], voxels)


# ------------------------------------------------------------ checkpoints


def test_checkpoint_roundtrip(tmp_path, samples):
    tr = Trainer(tiny_run(), *arrays_of(samples, 2))
    tr.train_step()
    path = save_checkpoint(tmp_path / "a.ckpt", tr.checkpoint())
    back = load_checkpoint(path)
    assert back.step == 1 and back.run == tr.run and back.fingerprint == tr.model.fingerprint
    for k, v in tr.model.params.items():
        assert np.array_equal(back.params[k], v.data) and back.params[k].dtype == v.data.dtype
    assert back.adam_t == {k: 1 for k in tr.model.params}
    assert encode_checkpoint(back) == path.read_bytes()
    blob = path.read_bytes()
    assert blob[:8] == b"SWVXCKPT"
    with pytest.raises(FormatError):
        decode_checkpoint(b"NOTACKPT" + blob[8:])
    with pytest.raises(FormatError):
        decode_checkpoint(blob[:-5])


def test_train_writes_artifacts_and_resumes(tmp_path, tiny_dataset):
    run = tiny_run(dataset=str(tiny_dataset), max_steps=6, checkpoint_every=2)
    before = {p: p.read_bytes() for p in tiny_dataset.rglob("*") if p.is_file()}
    full = train(run, tmp_path / "full")
    assert {p: p.read_bytes() for p in tiny_dataset.rglob("*") if p.is_file()} == before
    assert sorted(p.name for p in (tmp_path / "full").glob("*.ckpt")) == [
        "last.ckpt", "step-0000002.ckpt", "step-0000004.ckpt", "step-0000006.ckpt"]
    curve = read_loss_curve(tmp_path / "full/loss.txt")
    assert curve.shape == (6, 3) and list(curve[:, 0]) == [1, 2, 3, 4, 5, 6]
    part = train(dataclasses.replace(run, train=dataclasses.replace(run.train, max_steps=4)), tmp_path / "part")
    resumed = train(run, tmp_path / "part", resume=str(tmp_path / "part/step-0000004.ckpt"))
    assert part.trainer.step == 4 and resumed.trainer.step == 6
    assert resumed.checkpoint.read_bytes() == full.checkpoint.read_bytes()
    assert np.array_equal(read_loss_curve(tmp_path / "part/loss.txt")[:, :2], curve[:, :2])
    other = dataclasses.replace(run, encoder=dataclasses.replace(TINY_ENC, attention="v1-bias-table"))
    with pytest.raises(FingerprintMismatch):
        train(other, tmp_path / "x", resume=str(full.checkpoint))


# ------------------------------------------------------------ evaluation


def test_report_of_ground_truth_is_perfect(samples):
    _, voxels = arrays_of(samples, 3)
    rep = report_from_predictions(["a", "b", "c"], voxels.astype(float), voxels)
    assert rep.mean_iou == 1.0 and rep.mean_fscore == 1.0


def test_half_probability_model_iou_is_occupancy(tiny_dataset):
    model = Trainer(tiny_run(dataset=str(tiny_dataset)), *arrays_of([make_sample("s", 0, 0, image_size=32)], 1)).model
    for k, p in model.params.items():
        if k.startswith("dec.head."):
            p.data = np.zeros_like(p.data)
    ckpt = Checkpoint.capture(tiny_run(dataset=str(tiny_dataset)), model, None, 0, 0)
    rep = evaluate(ckpt, split="all")
    from swinvox.data import load_split
    truth = {s.id: s.voxels.mean() for s in load_split(tiny_dataset, "all")}
    assert rep.count == 10
    for rid, iou in zip(rep.ids, rep.iou):
        assert iou == pytest.approx(truth[rid], abs=1e-12)
    with pytest.raises(FingerprintMismatch):
        evaluate(ckpt, split="all", run=RunConfig())


def test_reconstruct(tmp_path, samples):
    tr = Trainer(tiny_run(), *arrays_of(samples, 2))
    ckpt = tr.checkpoint()
    save_image(tmp_path / "in.ppm", samples[0].image)
    written = reconstruct(ckpt, tmp_path / "in.ppm", tmp_path / "out.rvox", t=0.5, obj_path=tmp_path / "o.obj")
    probs = load_voxels_float(written["probability"])
    assert probs.shape == (32, 32, 32)
    assert np.array_equal(load_voxels(written["binary"]), probs > 0.5)
    np.testing.assert_allclose(probs, tr.predict(samples[0].image[None])[0], atol=1e-6)
    assert (tmp_path / "o.obj").exists()
    save_image(tmp_path / "big.ppm", np.zeros((3, 64, 64)))
    with pytest.raises(ConfigError):
        reconstruct(ckpt, tmp_path / "big.ppm", tmp_path / "x.rvox")


# ------------------------------------------------------------ export


def test_obj_counts():
    one = np.zeros((4, 4, 4), bool)
    one[1, 2, 3] = True
    text = voxels_to_obj(one)
    assert sum(line.startswith("v ") for line in text.splitlines()) == 8
    assert sum(line.startswith("f ") for line in text.splitlines()) == 12
    assert "v 0.25 0.5 0.75" in text and "v 0.5 0.75 1" in text
    empty = voxels_to_obj(np.zeros((4, 4, 4), bool)).splitlines()
    assert len(empty) == 1 and empty[0].startswith("#")
    block = np.zeros((4, 4, 4), bool)
    block[:2, :2, :2] = True
    lines = voxels_to_obj(block).splitlines()
    assert sum(x.startswith("v ") for x in lines) == 64 and sum(x.startswith("f ") for x in lines) == 96
    dedup = voxels_to_obj(block, dedup=True).splitlines()
    assert sum(x.startswith("v ") for x in dedup) == 27 and sum(x.startswith("f ") for x in dedup) == 96


# ------------------------------------------------------------ config


def test_config_parsing(tmp_path):
    run = parse_config(TINY_TEXT.format(dataset="d"))
    assert run.encoder == TINY_ENC and run.decoder == TINY_DEC and run.train.lr == 1e-3
    assert parse_config(dump_config(run)) == run
    paper = parse_config("[encoder]\npreset = paper\n[decoder]\npreset = paper\n")
    assert paper.encoder == EncoderConfig.paper() and paper.train == TrainConfig()
    for bad in ("[encoder]\nwidth = 3\n", "[model]\n", "[train]\nlr = fast\n", "[encoder]\npreset = huge\n",
                "[train]\nbatch_size = 0\n", "[encoder]\nwindow = \n"):
        with pytest.raises(ConfigError):
            parse_config(bad)
    path = tmp_path / "c.cfg"
    path.write_text("[train]\nseed = 3\n")
    assert load_config(str(path), env={}).train.seed == 3
    assert load_config(str(path), env={"R3DS_SEED": "11"}).train.seed == 11
    assert load_config(None, env={"R3DS_SEED": "5"}).train.seed == 5
    with pytest.raises(ConfigError):
        load_config(None, env={"R3DS_SEED": "x"})
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "missing.cfg"))


# ------------------------------------------------------------ CLI


def run_cli(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_cli_end_to_end(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("R3DS_SEED", raising=False)
    data = tmp_path / "data"
    code, out, _ = run_cli(capsys, "gen-data", data, "-n", 10, "--seed", 2, "--image-size", 32)
    assert code == 0 and "train=8" in out
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY_TEXT.format(dataset=data))
    code, out, err = run_cli(capsys, "train", "--config", cfg, "--out", tmp_path / "run", "--max-steps", 3,
                             "--log-every", 1)
    assert code == 0 and "step=3" in out and "step 3 loss" in err
    ckpt = tmp_path / "run/last.ckpt"
    code, out, _ = run_cli(capsys, "eval", ckpt, "--split", "all", "--jsonl")
    rows = [json.loads(x) for x in out.splitlines()]
    assert code == 0 and len(rows) == 10 and set(rows[0]) == {"id", "iou", "fscore"}
    code, out, _ = run_cli(capsys, "eval", ckpt, "--split", "val", "--config", cfg)
    assert code == 0 and "mean" in out
    code, _, err = run_cli(capsys, "eval", ckpt, "--config", tmp_path / "missing.cfg")
    assert code == 1 and "error" in err
    other = tmp_path / "other.cfg"
    other.write_text("[encoder]\nattention = v1-bias-table\n")
    code, _, err = run_cli(capsys, "eval", ckpt, "--config", other)
    assert code == 1 and "fingerprint" in err
    img = sorted((data / "images").iterdir())[0]
    code, out, _ = run_cli(capsys, "reconstruct", ckpt, img, tmp_path / "r.rvox", "--obj", tmp_path / "r.obj")
    assert code == 0 and "binary" in out and (tmp_path / "r.prob.rvox").exists()
    code, out, _ = run_cli(capsys, "export-obj", data / "voxels/s00000.rvox", tmp_path / "s.obj")
    occupied = int(load_voxels(data / "voxels/s00000.rvox").sum())
    assert code == 0 and f"occupied={occupied}" in out
    code, out, _ = run_cli(capsys, "plot-loss", tmp_path / "run/loss.txt", tmp_path / "loss.svg")
    assert code == 0 and (tmp_path / "loss.svg").read_text().startswith("<svg")
    code, _, err = run_cli(capsys, "export-obj", tmp_path / "nope.rvox", tmp_path / "n.obj")
    assert code == 3
    bad = tmp_path / "bad.rvox"
    bad.write_bytes(b"RVOX1\x01")
    code, _, err = run_cli(capsys, "export-obj", bad, tmp_path / "n.obj")
    assert code == 1 and "byte offset" in err


def test_cli_param_count(capsys):
    code, out, _ = run_cli(capsys, "param-count", "--json")
    assert code == 0 and json.loads(out)["total"] == 1_077_220
    code, out, _ = run_cli(capsys, "param-count", "--preset", "paper")
    assert code == 0 and "1,279,329" in out
    with pytest.raises(SystemExit) as exc:
        cli.main(["param-count", "--preset", "huge"])
    assert exc.value.code == 2


def test_cli_gradcheck_and_negative_control(capsys, monkeypatch):
    code, out, _ = run_cli(capsys, "gradcheck", "--preset", "tiny", "--entries", 20)
    assert code == 0 and "PASS" in out
    names = [line.split()[0] for line in out.splitlines()[1:21]]
    assert len(names) == 20 and all(n.startswith(("enc.", "dec.")) for n in names)
    assert {n.split(".")[0] for n in names} == {"enc", "dec"}

    true_grad = ops._sigmoid_grad
    monkeypatch.setattr(ops, "_sigmoid_grad", lambda out: 3.0 * true_grad(out))
    code, out, _ = run_cli(capsys, "gradcheck", "--preset", "tiny", "--entries", 20)
    assert code == 1 and "FAIL" in out
    from swinvox.verify import gradcheck, tiny_configs
    report = gradcheck(*tiny_configs(), n_entries=20)
    assert not report.passed and all(c.name for c in report.failures())
    assert "dec.head.bias" in {c.name for c in report.failures()}

"""Stage mechanics of the trainer on tiny configurations."""

import json

import numpy as np
import pytest

from fogflow import trainer
from fogflow.cda import CdaConfig
from fogflow.flownet import FlowNet, NetConfig
from fogflow.losses import LossLog
from fogflow.trainer import (ABLATIONS, Branches, DivergenceError, RealFog, TrainConfig, report_json,
                             run_pipeline, stage_cama, stage_dama, stage_joint)

TINY_NET = NetConfig(c1=4, feat=4, radius=1, sca_window=3, sca_k=2, disp_radius=1)


def tiny(**kw) -> TrainConfig:
    base = dict(width=32, height=32, clean_steps=2, syn_steps=2, cama_steps=2, joint_steps=2,
                n_train=2, n_real=2, n_eval=1, mask_warmup=1, net=TINY_NET, cda=CdaConfig(N=200))
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def dama():
    cfg = tiny()
    return cfg, stage_dama(cfg)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(clean_steps=-1), dict(lr=0.0), dict(width=30), dict(n_eval=0),
                                    dict(depth_source="lidar"), dict(batch=0)])
    def test_rejects_invalid(self, kw):
        with pytest.raises(ValueError):
            tiny(**kw)

    def test_dict_roundtrip(self):
        cfg = tiny(real=RealFog(beta=0.1), clip=None).with_weights(kl=0.0)
        back = TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert back == cfg

    def test_manifests_disjoint_and_eval_fixed(self):
        a, b = TrainConfig(seed=0), TrainConfig(seed=1)
        assert not set(a.train_manifest) & set(a.real_manifest)
        assert not set(a.train_manifest) & set(b.train_manifest)
        assert a.eval_manifest == b.eval_manifest
        assert not set(a.eval_manifest) & (set(a.train_manifest) | set(b.real_manifest))

    def test_ablation_rows_only_zero_weights(self):
        for row, kw in ABLATIONS.items():
            assert all(v == 0.0 for v in kw.values()), row


class TestStages:
    def test_zero_steps_leave_init(self):
        cfg = tiny(clean_steps=0, syn_steps=0)
        nets = stage_dama(cfg)
        ref = FlowNet(cfg.net, cfg.seed)
        for name, t in ref.params.items():
            np.testing.assert_array_equal(nets.clean.params[name].data, t.data)
            np.testing.assert_array_equal(nets.syn.params[name].data, t.data)

    def test_syn_starts_from_clean(self):
        cfg = tiny(syn_steps=0)
        nets = stage_dama(cfg)
        assert nets.state_hash("clean") == nets.state_hash("syn")

    def test_clean_branch_learns(self, dama):
        cfg, nets = dama
        assert nets.state_hash("clean") != Branches(FlowNet(cfg.net, cfg.seed), None).state_hash("clean")

    def test_cama_does_not_touch_other_branches(self, dama):
        cfg, nets = dama
        nets = Branches(nets.clean.clone(), nets.syn.clone())
        before = nets.state_hash("clean"), nets.state_hash("syn")
        stage_cama(cfg, nets)
        assert (nets.state_hash("clean"), nets.state_hash("syn")) == before
        assert nets.state_hash("real") != nets.state_hash("syn")

    def test_kl_gradient_stops_at_syn_volume(self, dama, monkeypatch):
        cfg, nets = dama
        cfg = cfg.with_weights(self=0.0)
        nets = Branches(nets.clean.clone(), nets.syn.clone())
        seen = []
        real_cda = trainer.cda_loss

        def spy(cv_r, cv_s, *a, **kw):
            seen.append((cv_r.values.requires_grad, cv_s.values.requires_grad))
            return real_cda(cv_r, cv_s, *a, **kw)
        monkeypatch.setattr(trainer, "cda_loss", spy)
        stage_cama(cfg, nets)
        assert seen == [(True, False)] * cfg.cama_steps
        assert all(t.grad is None or not np.any(t.grad) for _, t in nets.syn.params.items())

    def test_no_real_terms_means_pure_ema(self, dama):
        cfg, nets = dama
        cfg = cfg.with_weights(self=0.0, kl=0.0)
        syn = nets.syn
        nets = stage_cama(cfg, Branches(nets.clean.clone(), syn.clone()))
        lam = cfg.ema.lam
        for name, t in nets.real.params.items():
            # real == syn at the start, so any EMA blend reproduces syn exactly
            np.testing.assert_allclose(t.data, syn.params[name].data, atol=1e-12)
        assert 0 < lam < 1

    def test_ema_tracks_encoder_only(self, dama):
        cfg, nets = dama
        nets = Branches(nets.clean.clone(), nets.syn.clone())
        stage_cama(cfg, nets)
        real, syn = nets.real.params, nets.syn.params
        moved = [n for n in real.names() if not np.array_equal(real[n].data, syn[n].data)]
        assert moved  # the real branch was optimized
        assert not any(n.startswith("disp.") for n in moved)

    def test_joint_updates_all_branches(self, dama):
        cfg, nets = dama
        nets = stage_cama(cfg, Branches(nets.clean.clone(), nets.syn.clone()))
        before = {k: nets.state_hash(k) for k in ("clean", "syn", "real")}
        stage_joint(cfg, nets)
        assert all(nets.state_hash(k) != v for k, v in before.items())

    def test_loss_log_records_stages(self, dama):
        cfg, nets = dama
        log = LossLog()
        stage_cama(cfg, Branches(nets.clean.clone(), nets.syn.clone()), log)
        assert {r["stage"] for r in log.rows} == {"cama"}
        assert {"self", "kl"} <= set(log.rows[0])


class TestDivergence:
    def test_non_finite_loss_raises_with_stage_and_step(self, monkeypatch):
        cfg = tiny()
        real_terms = trainer.clean_terms

        def poisoned(net, s, *a, **kw):
            terms = real_terms(net, s, *a, **kw)
            terms["pho"] = terms["pho"] * np.nan
            return terms
        monkeypatch.setattr(trainer, "clean_terms", poisoned)
        with pytest.raises(DivergenceError) as info:
            stage_dama(cfg)
        assert info.value.stage == "dama-clean" and info.value.step == 0

    def test_spike_against_recent_median(self):
        history = [1.0] * trainer.GUARD_WINDOW
        trainer._guard("x", 60, 5.0, history)
        with pytest.raises(DivergenceError):
            trainer._guard("x", 61, 50.0, history)


class TestPipeline:
    def test_same_seed_reports_identical(self, tmp_path):
        cfg = tiny()
        a = run_pipeline(cfg, tmp_path / "a")
        b = run_pipeline(cfg)
        assert report_json(a) == report_json(b)
        saved = (tmp_path / "a" / "report.json").read_text()
        assert json.loads(saved) == json.loads(report_json(a))
        for name in ("real.json", "real.bin", "losses.csv", "flow_pred.ppm", "flow_gt.ppm"):
            assert (tmp_path / "a" / name).exists()

    def test_dama_cache_reuse_matches_fresh_run(self):
        cfg = tiny()
        cache: dict = {}
        first = run_pipeline(cfg, dama_cache=cache)
        assert len(cache) == 1
        second = run_pipeline(cfg.with_weights(kl=0.0), dama_cache=cache)
        assert len(cache) == 1
        fresh = run_pipeline(cfg.with_weights(kl=0.0))
        assert report_json(second) == report_json(fresh)
        assert first["stages"]["dama"] == second["stages"]["dama"]

    def test_report_fields(self):
        r = run_pipeline(tiny())
        assert set(r["stages"]) == {"dama", "cama", "joint"}
        assert r["final"]["real_epe"] == r["stages"]["joint"]["real_on_real"]["epe"]
        assert r["steps"] == 8
        assert r["stages"]["cama"]["kl_start"] >= 0.0

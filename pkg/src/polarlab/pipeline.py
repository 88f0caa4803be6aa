"""End-to-end experiment stages and report emission.

Stages read their inputs from the output directory, so every number in the
report can be recomputed from the persisted artifacts. A stage whose output
already exists is skipped unless ``force`` is set; missing inputs are built
by running the upstream stages first.
"""

from __future__ import annotations

import csv
import datetime as _dt
import importlib.resources
import json
import logging
import os
import platform
import time

import jsonschema
import numpy as np

from . import __version__, data, defense, guard, nn, risk
from .kernels import BACKEND
from .serialize import load_model, save_model

log = logging.getLogger(__name__)

STAGES = ("gen-data", "poison", "train-victim", "baseline-eval", "defend", "eval", "detect",
          "risk-check")


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage, self.cause = stage, cause


def _write_json(path, obj):
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)


def _read_json(path):
    with open(path, encoding="utf-8") as f:
        return json.load(f)


class Pipeline:
    def __init__(self, cfg, force=False):
        self.cfg = cfg
        self.force = force
        self.out = cfg.out
        self._done = set()

    # paths -----------------------------------------------------------------

    def path(self, *parts):
        p = os.path.join(self.out, *parts)
        os.makedirs(os.path.dirname(p), exist_ok=True)
        return p

    def defense_path(self, name, defense_name=None):
        return self.path("defenses", defense_name or self.cfg.defense, name)

    @property
    def artifacts(self):
        return {
            "gen-data": [self.path("data", "train.npds"), self.path("data", "test.npds")],
            "poison": [self.path("data", "poisoned_train.npds")],
            "train-victim": [self.path("models", "victim.nplr")],
            "baseline-eval": [self.path("metrics", "baseline.json")],
            "defend": [self.defense_path("model.nplr"), self.defense_path("curves.csv")],
            "eval": [self.defense_path("eval.json"), self.defense_path("feature_stats.csv")],
            "detect": [self.defense_path("detect.json")],
            "risk-check": [self.path("metrics", "theorem2.json")],
        }

    # driver ----------------------------------------------------------------

    def ensure(self, stage):
        """Run ``stage`` unless its artifacts exist (upstream stages never forced)."""
        if stage in self._done or all(os.path.exists(p) for p in self.artifacts[stage]):
            return
        self._run(stage)

    def stage(self, stage):
        """Run ``stage`` as requested by the user, honoring ``force``."""
        if self.force or not all(os.path.exists(p) for p in self.artifacts[stage]):
            self._run(stage)
        else:
            log.info("%s: outputs present, skipping (use --force to redo)", stage)
        self.write_report()

    def run_all(self):
        for s in STAGES:
            if s == "risk-check" and not self.cfg.risk_check:
                continue
            if self.force:
                if s not in self._done:
                    self._run(s)
            else:
                self.ensure(s)
        self.write_report()

    def _run(self, stage):
        fn = getattr(self, "stage_" + stage.replace("-", "_"))
        log.info("%s: running", stage)
        t0 = time.perf_counter()
        try:
            fn()
        except StageError:
            raise
        except Exception as e:  # noqa: BLE001 - surfaced with the stage name
            raise StageError(stage, e) from e
        self._done.add(stage)
        log.info("%s: done in %.1fs", stage, time.perf_counter() - t0)

    # loaders ---------------------------------------------------------------

    def load_split(self, name):
        stage = "poison" if name == "poisoned_train" else "gen-data"
        self.ensure(stage)
        split = "test" if name == "test" else "train"
        return data.load_dataset(self.path("data", name + ".npds"), split)

    def load_victim(self):
        self.ensure("train-victim")
        return load_model(self.path("models", "victim.nplr"))

    def load_defended(self):
        self.ensure("defend")
        return load_model(self.defense_path("model.nplr"))

    def asr_set(self, test):
        spec = self.cfg.poison_spec()
        s = data.make_asr_eval_set(test, spec)
        return s, data.asr_targets(s, spec)

    def clean_subset(self, train):
        return train.subset(data.stratified_subset(train, self.cfg.clean_fraction, self.cfg.seed))

    # stages ----------------------------------------------------------------

    def stage_gen_data(self):
        c = self.cfg
        train, test = data.gen_shapes_dataset(c.seed, c.num_classes, c.n_train, c.n_test,
                                              c.height, c.width)
        data.save_dataset(train, self.path("data", "train.npds"))
        data.save_dataset(test, self.path("data", "test.npds"))

    def stage_poison(self):
        train = self.load_split("train")
        poisoned = data.poison_dataset(train, self.cfg.poison_spec(), self.cfg.seed)
        data.save_dataset(poisoned, self.path("data", "poisoned_train.npds"))

    def stage_train_victim(self):
        c = self.cfg
        ds = self.load_split("poisoned_train")
        net = nn.build_cnn(c.num_classes, (3, c.height, c.width), seed=c.seed)
        nn.train_supervised(net, ds.images, ds.labels, c.victim_hp())
        save_model(net, self.path("models", "victim.nplr"))

    def _metrics(self, net, test):
        aset, targets = self.asr_set(test)
        return {"acc": guard.eval_acc(net, test.images, test.labels),
                "asr": guard.eval_asr(net, aset.images, targets, aset.labels)}

    def stage_baseline_eval(self):
        test = self.load_split("test")
        m = self._metrics(self.load_victim(), test)
        _write_json(self.path("metrics", "baseline.json"), m)

    def stage_defend(self):
        c = self.cfg
        victim = self.load_victim()
        train, test = self.load_split("train"), self.load_split("test")
        clean = self.clean_subset(train)
        aset, targets = self.asr_set(test)
        pi = np.linspace(0, len(test) - 1, min(c.probe_size, len(test))).astype(np.int64)
        pa = np.linspace(0, len(aset) - 1, min(c.probe_size, len(aset))).astype(np.int64)

        def probe(net):
            return (guard.eval_acc(net, test.images[pi], test.labels[pi]),
                    guard.eval_asr(net, aset.images[pa], targets[pa], aset.labels[pa]))

        dcfg = c.defense_config()
        res = defense.defend(c.defense, victim, clean.images, clean.labels, dcfg, probe=probe)
        save_model(res.net, self.defense_path("model.nplr"))
        with open(self.defense_path("curves.csv"), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "objective", "acc", "asr"])
            for row in res.curves:
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])

    def stage_eval(self):
        test = self.load_split("test")
        self.ensure("baseline-eval")
        base = _read_json(self.path("metrics", "baseline.json"))
        net = self.load_defended()
        m = self._metrics(net, test)
        m["der"] = guard.der(base["acc"], base["asr"], m["acc"], m["asr"])
        _write_json(self.defense_path("eval.json"), m)
        guard.emit_feature_stats(net, test.images[:self.cfg.probe_size],
                                 self.defense_path("feature_stats.csv"))

    def stage_detect(self):
        test = self.load_split("test")
        aset, _ = self.asr_set(test)
        tpr, fpr = guard.detection_rates(self.load_defended(), test.images, aset.images)
        _write_json(self.defense_path("detect.json"), {"tpr": tpr, "fpr": fpr})

    def stage_risk_check(self):
        n, seed = self.cfg.risk_instances, self.cfg.seed
        held = risk.theorem2_sweep(n, seed, premises=True)
        gated = risk.theorem2_sweep(max(1, n // 5), seed + n, premises=False)
        _write_json(self.path("metrics", "theorem2.json"), {
            "premises_met": risk.summarize(held),
            "premises_violated": risk.summarize(gated),
            "verdicts": [v.to_dict() for v in held],
        })

    # report ----------------------------------------------------------------

    def report(self):
        c = self.cfg
        rep = {
            "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
            "seed": c.seed,
            "versions": {"polarlab": __version__, "numpy": np.__version__,
                         "python": platform.python_version(), "kernels": BACKEND},
            "config": c.to_dict(),
            "defense": c.defense,
            "defense_config": c.defense_config().to_dict(),
            "asr_protocol": ("triggered non-target test samples vs the target label"
                             if c.poison_mode == "all2one" else
                             "every triggered test sample vs (y + 1) mod C"),
            "baseline": None, "defended": None, "der": None, "detection": None,
            "theorem2": None, "curves": None,
        }
        files = self.artifacts
        if os.path.exists(files["baseline-eval"][0]):
            rep["baseline"] = _read_json(files["baseline-eval"][0])
        if os.path.exists(files["eval"][0]):
            ev = _read_json(files["eval"][0])
            rep["defended"] = {"acc": ev["acc"], "asr": ev["asr"]}
            rep["der"] = ev["der"]
        if os.path.exists(files["detect"][0]):
            rep["detection"] = _read_json(files["detect"][0])
        if os.path.exists(files["risk-check"][0]):
            t2 = _read_json(files["risk-check"][0])
            rep["theorem2"] = {k: t2[k] for k in ("premises_met", "premises_violated")}
        curves = files["defend"][1]
        if os.path.exists(curves):
            with open(curves, newline="") as f:
                rows = len(list(csv.reader(f))) - 1
            rep["curves"] = {"path": os.path.relpath(curves, self.out), "rows": rows}
        return rep

    def write_report(self):
        rep = self.report()
        validate_report(rep)
        _write_json(self.path("report.json"), rep)
        with open(self.path("report.txt"), "w", encoding="utf-8") as f:
            f.write(format_report(rep))
        return rep


def report_schema():
    ref = importlib.resources.files("polarlab") / "schema" / "report.schema.json"
    return json.loads(ref.read_text(encoding="utf-8"))


def validate_report(rep):
    """Raise ``jsonschema.ValidationError`` when ``rep`` breaks the shipped schema."""
    jsonschema.validate(rep, report_schema())


def _pct(v):
    return "-" if v is None else f"{100 * v:6.2f}%"


def format_report(rep):
    """Aligned-column text view of a report dict (percentages for display only)."""
    base, dfd = rep["baseline"] or {}, rep["defended"] or {}
    det = rep["detection"] or {}
    rows = [
        ("defense", rep["defense"]),
        ("seed", str(rep["seed"])),
        ("baseline ACC", _pct(base.get("acc"))),
        ("baseline ASR", _pct(base.get("asr"))),
        ("defended ACC", _pct(dfd.get("acc"))),
        ("defended ASR", _pct(dfd.get("asr"))),
        ("DER", _pct(rep["der"])),
        ("NPDT TPR", _pct(det.get("tpr"))),
        ("NPDT FPR", _pct(det.get("fpr"))),
    ]
    t2 = rep.get("theorem2")
    if t2:
        m = t2["premises_met"]
        rows.append(("theorem2", f"{m['holds']}/{m['instances']} hold, {m['fails']} fail"))
    width = max(len(k) for k, _ in rows)
    return "".join(f"{k:<{width}}  {v}\n" for k, v in rows)


def run_pipeline(cfg, force=False):
    p = Pipeline(cfg, force)
    p.run_all()
    return p.report()

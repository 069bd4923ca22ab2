"""Run records on disk and the flask run browser."""
import pytest

from run_log import RunRecord
from ui.app import app
from view_run import list_all_runs, view_run


def _step(step, total):
    record = {"kind": "step", "step": step, "total": total}
    record.update({name: total / 6 for name in ("focal", "dice", "align", "contrastive", "centroid", "presence")})
    return record


@pytest.fixture
def finished_run(runs_dir):
    run = RunRecord("train_demo", "train", {"seed": 0})
    run.add_step(_step(0, 1.2))
    run.add_step(_step(1, 0.9))
    run.add_epoch(0, {"miou": 0.25, "oracle_miou": 0.5, "gap": 0.25})
    run.finish("completed", {"steps": 2})
    return run


@pytest.fixture
def client(finished_run):
    app.config["TESTING"] = True
    return app.test_client()


def test_record_round_trip(finished_run):
    loaded = RunRecord.load("train_demo")
    assert loaded.status == "completed"
    assert [s["step"] for s in loaded.steps] == [0, 1]
    assert loaded.epochs[0]["miou"] == 0.25
    assert loaded.results == {"steps": 2}
    assert RunRecord.list_runs() == ["train_demo"]


def test_missing_record(runs_dir):
    assert RunRecord.load("nope") is None
    assert RunRecord.list_runs() == []


def test_summary_text(finished_run):
    summary = RunRecord.load("train_demo").get_summary()
    assert "Status: completed" in summary
    assert "last step 1" in summary
    assert "miou=0.2500" in summary


def test_view_run_prints_terms(finished_run, capsys):
    view_run("train_demo")
    out = capsys.readouterr().out
    assert "LOSS TERMS" in out and "focal=" in out
    list_all_runs()
    assert "train_demo" in capsys.readouterr().out


def test_api_lists_runs(client):
    response = client.get("/api/runs")
    assert response.status_code == 200
    runs = response.get_json()
    assert [r["run_id"] for r in runs] == ["train_demo"]
    assert runs[0]["last_loss"] == 0.9


def test_api_run_detail_has_curve(client):
    data = client.get("/api/runs/train_demo").get_json()
    assert data["curve"]["total"] == [1.2, 0.9]
    assert set(data["curve"]["terms"]) >= {"focal", "presence"}
    assert client.get("/api/runs/absent").status_code == 404


def test_html_pages(client):
    assert client.get("/").status_code == 302
    page = client.get("/runs")
    assert page.status_code == 200
    assert b"train_demo" in page.data
    assert client.get("/runs/train_demo").status_code == 200
    assert client.get("/runs/absent").status_code == 404

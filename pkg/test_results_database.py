import pandas as pd
import pytest

from results_database import TABLE_SCHEMAS, ResultsLoader


@pytest.fixture
def db_path(tmp_path):
    return tmp_path / "results.duckdb"


def test_tables_start_empty(db_path):
    with ResultsLoader(db_path) as loader:
        assert loader.get_table_counts() == {name: 0 for name in TABLE_SCHEMAS}


def test_load_and_fetch(db_path):
    rows = pd.DataFrame([
        {"run_id": "r1", "dataset": "d.mmtd", "sample": 0, "n_views": 4, "mpjpe": 1.5,
         "pa_mpjpe": 1.0, "mpve": 2.0, "smooth": 0.1},
        {"run_id": "r1", "dataset": "d.mmtd", "sample": 1, "n_views": 4, "mpjpe": 2.5,
         "pa_mpjpe": 2.0, "mpve": 3.0, "smooth": 0.2, "extra": "dropped"},
    ])
    with ResultsLoader(db_path) as loader:
        assert loader.load("evaluations", rows) == 2
        fetched = loader.fetch("evaluations")
    assert list(fetched.columns) == TABLE_SCHEMAS["evaluations"]
    assert fetched["mpjpe"].tolist() == [1.5, 2.5]
    assert fetched["created_at"].notna().all()


def test_missing_columns_become_null(db_path):
    with ResultsLoader(db_path) as loader:
        loader.load("training_runs", pd.DataFrame([{"run_id": "r2", "epochs": 3}]))
        fetched = loader.fetch("training_runs")
    assert fetched.loc[0, "epochs"] == 3
    assert pd.isna(fetched.loc[0, "final_loss"])


def test_empty_frame_loads_nothing(db_path):
    with ResultsLoader(db_path) as loader:
        assert loader.load("ablation_results", pd.DataFrame()) == 0
        assert loader.get_table_counts()["ablation_results"] == 0


def test_unknown_table(db_path):
    with ResultsLoader(db_path) as loader:
        with pytest.raises(KeyError):
            loader.load("runs", pd.DataFrame([{"a": 1}]))
        with pytest.raises(KeyError):
            loader.fetch("runs")


def test_rows_persist_across_connections(db_path):
    row = pd.DataFrame([{"axis": "views", "setting": "4", "mpjpe": 10.0}])
    with ResultsLoader(db_path) as loader:
        loader.load("ablation_results", row)
    with ResultsLoader(db_path) as loader:
        loader.load("ablation_results", row)
        assert loader.get_table_counts()["ablation_results"] == 2

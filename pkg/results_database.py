import logging
from typing import Dict, List, Union
from pathlib import Path

import duckdb
import pandas as pd

logger = logging.getLogger(__name__)

DEFAULT_DB_PATH = "mmt_results.duckdb"

TABLE_SCHEMAS: Dict[str, List[str]] = {
    "training_runs": ["run_id", "dataset", "config_text", "epochs", "steps", "final_loss",
                      "checkpoint", "created_at"],
    "evaluations": ["run_id", "dataset", "sample", "n_views", "mpjpe", "pa_mpjpe", "mpve",
                    "smooth", "created_at"],
    "ablation_results": ["axis", "setting", "mpjpe", "pa_mpjpe", "mpve", "smooth",
                         "published_mpjpe_not_reproduced", "published_pa_mpjpe_not_reproduced",
                         "published_mpve_not_reproduced", "created_at"],
}


class ResultsDatabase:
    def __init__(self, db_path: Union[str, Path] = DEFAULT_DB_PATH):
        """Open (or create) the results database."""
        self.db_path = str(db_path)
        self.conn = duckdb.connect(self.db_path)
        self.create_tables()

    def create_tables(self):
        """Create the results tables if they do not exist."""

        # One row per finished training run
        self.conn.execute("""
            CREATE TABLE IF NOT EXISTS training_runs (
                run_id VARCHAR,
                dataset VARCHAR,
                config_text TEXT,
                epochs INTEGER,
                steps INTEGER,
                final_loss DOUBLE,
                checkpoint VARCHAR,
                created_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP
            )
        """)

        # Per-sample master-view metrics, in millimeter-equivalent units
        self.conn.execute("""
            CREATE TABLE IF NOT EXISTS evaluations (
                run_id VARCHAR,
                dataset VARCHAR,
                sample INTEGER,
                n_views INTEGER,
                mpjpe DOUBLE,
                pa_mpjpe DOUBLE,
                mpve DOUBLE,
                smooth DOUBLE,
                created_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP
            )
        """)

        # One row per ablation setting; published_* columns are context, not reproduced
        self.conn.execute("""
            CREATE TABLE IF NOT EXISTS ablation_results (
                axis VARCHAR,
                setting VARCHAR,
                mpjpe DOUBLE,
                pa_mpjpe DOUBLE,
                mpve DOUBLE,
                smooth DOUBLE,
                published_mpjpe_not_reproduced DOUBLE,
                published_pa_mpjpe_not_reproduced DOUBLE,
                published_mpve_not_reproduced DOUBLE,
                created_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP
            )
        """)

        logger.debug(f"Results tables ready in {self.db_path}")

    def close(self):
        if self.conn:
            self.conn.close()
            self.conn = None

    def get_connection(self):
        return self.conn


class ResultsLoader:
    """Append result DataFrames to the DuckDB results store."""

    def __init__(self, db_path: Union[str, Path] = DEFAULT_DB_PATH):
        self.db = ResultsDatabase(db_path)
        self.conn = self.db.get_connection()

    def __enter__(self) -> "ResultsLoader":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.close()

    def load(self, table: str, df: pd.DataFrame) -> int:
        """Append `df` to `table`; missing columns become NULL, extra columns are dropped."""
        if table not in TABLE_SCHEMAS:
            raise KeyError(f"Unknown results table: {table}")
        if df.empty:
            logger.info(f"No {table} rows to load")
            return 0

        df = df.copy()
        df["created_at"] = pd.Timestamp.now()
        columns = TABLE_SCHEMAS[table]
        for col in columns:
            if col not in df.columns:
                df[col] = None
        df = df[columns]

        self.conn.register("temp_df", df)
        try:
            self.conn.execute(f"INSERT INTO {table} SELECT * FROM temp_df")
        finally:
            self.conn.unregister("temp_df")
        logger.info(f"Loaded {len(df)} {table} rows")
        return len(df)

    def fetch(self, table: str) -> pd.DataFrame:
        if table not in TABLE_SCHEMAS:
            raise KeyError(f"Unknown results table: {table}")
        return self.conn.execute(f"SELECT * FROM {table}").df()

    def get_table_counts(self) -> Dict[str, int]:
        """Row counts for every results table."""
        counts = {}
        for table in TABLE_SCHEMAS:
            result = self.conn.execute(f"SELECT COUNT(*) FROM {table}").fetchone()
            counts[table] = result[0] if result else 0
        return counts

    def close(self):
        if self.db:
            self.db.close()
            self.db = None

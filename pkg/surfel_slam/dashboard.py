"""Streamlit viewer for run directories written by `surfel-slam run` and `basin`.

Launch with `streamlit run run_dashboard.py`.
"""
from pathlib import Path

import pandas as pd
import plotly.express as px
import plotly.graph_objects as go
import streamlit as st

from surfel_slam.errors import DataError
from surfel_slam.io_datasets import read_trajectory_tum

RUN_FILES = {
    "metrics": "metrics.csv",
    "mapping": "mapping_trace.csv",
    "tracking": "tracking_trace.csv",
    "basin": "basin.csv",
}


def trajectory_frame(path):
    """Camera centers of a TUM trajectory file as a DataFrame."""
    rows = [(t, *pose.center) for t, pose in read_trajectory_tum(path)]
    return pd.DataFrame(rows, columns=["timestamp", "x", "y", "z"])


def load_run(run_dir):
    """All tables found in a run directory; missing files are simply absent."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise DataError(f"run directory {run_dir} does not exist")
    tables = {}
    for key, name in RUN_FILES.items():
        path = run_dir / name
        if path.is_file():
            tables[key] = pd.read_csv(path)
    for key, name in (("trajectory", "trajectory.txt"), ("groundtruth", "groundtruth.txt")):
        path = run_dir / name
        if path.is_file():
            tables[key] = trajectory_frame(path)
    return tables


def trajectory_figure(est, gt=None):
    fig = go.Figure()
    fig.add_trace(go.Scatter3d(x=est["x"], y=est["y"], z=est["z"], mode="lines+markers",
                               marker=dict(size=2), name="estimated"))
    if gt is not None:
        fig.add_trace(go.Scatter3d(x=gt["x"], y=gt["y"], z=gt["z"], mode="lines",
                                   line=dict(dash="dash"), name="ground truth"))
    fig.update_layout(scene=dict(aspectmode="data"), margin=dict(l=0, r=0, t=30, b=0))
    return fig


def loss_figure(trace, x="iteration", group="window"):
    """Total loss per iteration, one line per mapping window or tracked frame."""
    totals = trace.groupby([group, x], as_index=False)["total"].sum()
    return px.line(totals, x=x, y="total", color=group, log_y=True)


def basin_figure(table):
    return px.line(table, x="radius", y="success_rate", color="variant", markers=True,
                   labels={"radius": "initial distance (m)", "success_rate": "success rate"})


def main():
    st.title("Surfel SLAM run viewer")
    run_dir = st.sidebar.text_input("Run directory", "out")
    try:
        tables = load_run(run_dir)
    except DataError as exc:
        st.error(str(exc))
        return

    page = st.sidebar.selectbox("Choose a view", ["Metrics", "Trajectory", "Loss traces", "Convergence basin"])

    if page == "Metrics":
        st.header("Run metrics")
        if "metrics" not in tables:
            st.info("No metrics.csv in this directory.")
            return
        row = tables["metrics"].iloc[0]
        shown = [k for k in ("ate_rmse", "psnr", "depth_l1", "f1", "surfels") if k in row]
        for col, key in zip(st.columns(len(shown)), shown):
            with col:
                st.metric(key, f"{row[key]:.4g}")
        st.dataframe(tables["metrics"].T.rename(columns={0: "value"}))

    elif page == "Trajectory":
        st.header("Camera trajectory")
        if "trajectory" not in tables:
            st.info("No trajectory.txt in this directory.")
            return
        st.plotly_chart(trajectory_figure(tables["trajectory"], tables.get("groundtruth")))

    elif page == "Loss traces":
        st.header("Optimization traces")
        if "mapping" in tables:
            st.subheader("Mapping")
            st.plotly_chart(loss_figure(tables["mapping"]))
        if "tracking" in tables:
            st.subheader("Tracking")
            st.plotly_chart(loss_figure(tables["tracking"], group="frame_id"))
        if "mapping" not in tables and "tracking" not in tables:
            st.info("No trace files in this directory.")

    elif page == "Convergence basin":
        st.header("Convergence basin")
        if "basin" not in tables:
            st.info("No basin.csv in this directory; run `surfel-slam basin --out DIR`.")
            return
        st.plotly_chart(basin_figure(tables["basin"]))
        st.dataframe(tables["basin"])


if __name__ == "__main__":
    main()

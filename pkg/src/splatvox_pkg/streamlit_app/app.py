import json
import sys
from pathlib import Path

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
import streamlit as st

from splatvox_pkg import analysis, pipeline

def default_build_dir():
    """Build directory passed after `--` on the command line, else ./splatvox_out."""
    return sys.argv[1] if len(sys.argv) > 1 else "splatvox_out"

@st.cache_data
def load_report(build_dir):
    with open(Path(build_dir) / pipeline.REPORT_FILE) as f:
        return json.load(f)

@st.cache_data
def load_views(build_dir, indices):
    """Identity-camera renders of selected build poses."""
    poses = [pose for _, pose in pipeline.load_poses(build_dir)]
    return pipeline.run_render(build_dir, [poses[i] for i in indices])

def show_figure():
    col1, col2, col3 = st.columns([1, 3, 1])
    with col2:
        st.pyplot(plt.gcf())
        plt.close()

def main():
    st.set_page_config(page_title="splatvox run dashboard", layout="wide")
    st.title("splatvox run dashboard")

    # Sidebar for navigation
    page = st.sidebar.selectbox("Pages", ["Overview", "Loss Trace", "Stage Timings", "Renders", "Metrics"])
    build_dir = Path(st.sidebar.text_input("Build directory", value=default_build_dir()))

    if not (build_dir / pipeline.REPORT_FILE).exists():
        st.error(f"No run report in {build_dir}. Run `splatvox build --out {build_dir}` first.")
        return
    report = load_report(str(build_dir))

    # Warnings collected during the build
    if report.get("warnings"):
        st.sidebar.warning(f"{len(report['warnings'])} warning(s) during the build:")
        for warning in report["warnings"][:20]:
            st.sidebar.warning(warning)

    if page == "Overview":
        st.header("Overview")
        col1, col2, col3 = st.columns(3)
        col1.metric("Frames", report["n_frames"])
        col2.metric("Frame rate (fps)", f"{report['fps']:.2f}")
        col3.metric("Model size (MB)", f"{report['model_size_mb']:.3f}")
        st.subheader("Map contents")
        st.dataframe(pd.DataFrame([report["counts"]]))
        if (build_dir / pipeline.CONFIG_FILE).exists():
            st.subheader("Configuration")
            st.json(json.loads((build_dir / pipeline.CONFIG_FILE).read_text()))

    elif page == "Loss Trace":
        st.header("Loss Trace")
        trace = analysis.load_loss_trace(build_dir / pipeline.LOSS_TRACE_FILE)
        if trace.empty:
            st.info("This build ran without optimization.")
            return
        components = st.multiselect("Components", analysis.LOSS_COMPONENTS, default=["total"])
        log_scale = st.checkbox("Logarithmic scale", value=False)
        analysis.plot_loss_trace(trace, components or None, log_scale)
        show_figure()
        st.dataframe(analysis.summarize_loss_trace(trace))

    elif page == "Stage Timings":
        st.header("Stage Timings")
        timings = pd.read_csv(build_dir / pipeline.TIMINGS_FILE)
        if timings.empty:
            st.info("No frames were processed.")
            return
        analysis.plot_stage_timings(timings)
        show_figure()
        st.dataframe(timings.groupby("stage", sort=False)["ms"].describe())

    elif page == "Renders":
        st.header("Renders")
        n_poses = len(pipeline.load_poses(build_dir))
        if n_poses == 0:
            st.info("No camera poses recorded.")
            return
        index = st.slider("Pose", min_value=0, max_value=n_poses - 1, value=0)
        view = load_views(str(build_dir), (index,))[0]
        col1, col2, col3 = st.columns(3)
        col1.image(np.clip(view.color, 0, 1), caption="Color", use_container_width=True)
        depth = view.depth / max(float(view.depth.max()), 1e-9)
        col2.image(depth, caption="Depth", use_container_width=True, clamp=True)
        col3.image((view.normal + 1) / 2, caption="Normals", use_container_width=True, clamp=True)

    elif page == "Metrics":
        st.header("Metrics")
        metrics_path = build_dir / "metrics.json"
        if st.button("Run evaluation"):
            with st.spinner("Evaluating..."):
                pipeline.run_eval(build_dir)
        if not metrics_path.exists():
            st.info("No metrics yet. Synthetic builds can be evaluated with the button above.")
            return
        metrics = json.loads(metrics_path.read_text())
        st.subheader("Rendering")
        st.dataframe(pd.DataFrame([metrics["rendering"]]))
        if metrics.get("mesh"):
            st.subheader("Mesh")
            st.dataframe(pd.DataFrame([metrics["mesh"]]))
        if metrics.get("semantic"):
            st.subheader("Zero-shot segmentation")
            semantic = metrics["semantic"]
            st.dataframe(pd.DataFrame({"IoU": semantic["iou"], "Acc": semantic["acc"]}))
            st.write({k: semantic[k] for k in ("mIoU", "fIoU", "mAcc", "fAcc")})

if __name__ == "__main__":
    main()

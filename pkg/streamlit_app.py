import warnings
from datetime import datetime

import altair as alt
import numpy as np
import pandas as pd
import streamlit as st

from cli_report import run_check
from config import CHECKS, DEFAULT_DB_PATH, TOLERANCES, RunConfig
from errors import IBPError
from report_store import get_connection, json_safe, read_reports, save_report, summarize_reports, summary_frame
from scenarios import list_scenarios

warnings.filterwarnings('ignore')

ALL_SCENARIOS = "All scenarios"
ALL_CHECKS = "All checks"


# SQLite connection shared across reruns
@st.cache_resource
def get_db_connection(db_path=DEFAULT_DB_PATH):
    try:
        return get_connection(db_path)
    except Exception as e:
        st.error(f"Could not open the run history database: {e}")
        return None


def load_history(conn, scenario, check):
    try:
        return read_reports(
            conn,
            None if scenario == ALL_SCENARIOS else scenario,
            None if check == ALL_CHECKS else check,
        )
    except Exception as e:
        st.error(f"Could not read the run history: {e}")
        return None


def z_chart(df):
    """z-score per run with the acceptance threshold as a rule."""
    data = df.dropna(subset=['z']).copy()
    data['run'] = range(1, len(data) + 1)
    points = alt.Chart(data).mark_circle(size=60).encode(
        x=alt.X('run:Q', title='run'),
        y=alt.Y('z:Q', title='paired z-score'),
        color=alt.Color('passed:N', title='pass'),
        tooltip=['scenario', 'check_id', 'z', 'recorded_at'],
    )
    rule = alt.Chart(pd.DataFrame({'z': [TOLERANCES.z_threshold]})).mark_rule(color='red').encode(y='z:Q')
    return points + rule


def display_summary(df):
    summary_data = summarize_reports(df)
    if not summary_data:
        st.warning("No recorded runs match the selection.")
        return

    table = summary_frame(summary_data)
    for scenario in sorted(summary_data):
        st.subheader(f"Scenario: {scenario}")
        st.table(table[table['scenario'] == scenario].drop(columns=['scenario']).reset_index(drop=True))

        failed = df[(df['scenario'] == scenario) & (~df['passed'])]
        with st.expander(f"Failed runs ({len(failed)})", expanded=False):
            if failed.empty:
                st.text("none")
            else:
                st.dataframe(failed.drop(columns=['report']).reset_index(drop=True))
        st.markdown("---")

    st.download_button(
        label="Download summary",
        data=table.to_csv(index=False).encode('utf-8-sig'),
        file_name=f"ibp_summary_{datetime.now().strftime('%Y%m%d_%H%M%S')}.csv",
        mime="text/csv",
        key="download_summary",
    )

    st.subheader("Charts")
    st.altair_chart(z_chart(df), use_container_width=True)

    chart_data = table.set_index(table['scenario'] + " / " + table['check'])[['pass', 'fail']]
    col1, col2 = st.columns(2)
    with col1:
        if st.button("Show line chart", key="line_chart_btn"):
            st.session_state.show_line_chart = not st.session_state.show_line_chart
        if st.session_state.show_line_chart:
            st.line_chart(chart_data)
    with col2:
        if st.button("Show bar chart", key="bar_chart_btn"):
            st.session_state.show_bar_chart = not st.session_state.show_bar_chart
        if st.session_state.show_bar_chart:
            st.bar_chart(chart_data)


def form_config(scenario, check, paths, steps, seed, use_defaults):
    """RunConfig for a dashboard run; with use_defaults the check picks its own sizes."""
    if use_defaults:
        return RunConfig(scenario=scenario, check=check)
    return RunConfig(scenario=scenario, check=check, paths=int(paths), steps=int(steps), seed=int(seed))


def run_form(conn, scenario_ids):
    """Run one check from the dashboard and record it."""
    with st.form("run_check"):
        scenario = st.selectbox("Scenario", scenario_ids, key="run_scenario")
        check = st.selectbox("Check", CHECKS, key="run_check")
        col1, col2, col3 = st.columns(3)
        paths = col1.number_input("Paths", min_value=1, value=2000, step=1000)
        steps = col2.number_input("Steps", min_value=1, value=256, step=64)
        seed = col3.number_input("Seed", min_value=0, value=0, step=1)
        use_defaults = st.checkbox("Use check defaults", value=True, help="ignore the sizes above and run with the check's own")
        submitted = st.form_submit_button("Run check")

    if submitted:
        with st.spinner(f"Running {check} on {scenario}..."):
            try:
                report = run_check(form_config(scenario, check, paths, steps, seed, use_defaults))
            except (IBPError, np.linalg.LinAlgError, FloatingPointError) as e:
                st.error(f"Run failed: {e}")
                return
            save_report(conn, report.to_dict())
        if report.passed:
            st.success(f"{check} on {scenario} passed.")
        else:
            st.error(f"{check} on {scenario} failed its threshold.")
        st.json(json_safe(report.to_dict()))


def main():
    st.set_page_config(layout="wide")
    st.title("Integration-by-parts check history")
    st.markdown("---")

    conn = get_db_connection()
    if conn is None:
        return

    if 'show_line_chart' not in st.session_state:
        st.session_state.show_line_chart = False
    if 'show_bar_chart' not in st.session_state:
        st.session_state.show_bar_chart = False

    scenario_ids = [scenario_id for scenario_id, _ in list_scenarios()]
    tab1, tab2 = st.tabs(["History", "Run"])

    with tab1:
        col1, col2 = st.columns(2)
        scenario = col1.selectbox("Scenario", [ALL_SCENARIOS] + scenario_ids, key="history_scenario")
        check = col2.selectbox("Check", [ALL_CHECKS] + list(CHECKS), key="history_check")
        df = load_history(conn, scenario, check)
        if df is not None:
            st.write(f"**Recorded runs**: {len(df)}")
            display_summary(df)

    with tab2:
        run_form(conn, scenario_ids)


if __name__ == "__main__":
    main()

"""Flask web application for browsing training, evaluation and ablation runs."""
from flask import Flask, render_template, jsonify, redirect, url_for
import os
import sys

# Add parent directory to path to import modules
project_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, project_root)

# Ensure .env is loaded from project root
from dotenv import load_dotenv
load_dotenv(os.path.join(project_root, '.env'))

from run_log import RunRecord
from losses import TERMS
import config

# Runs directory is relative to the project root, not ui/
if not os.path.isabs(config.RUNS_DIR):
    config.RUNS_DIR = os.path.join(project_root, config.RUNS_DIR)

app = Flask(__name__)


def get_all_runs():
    """Summaries of every run, newest first."""
    runs = []
    for run_id in RunRecord.list_runs():
        try:
            record = RunRecord.load(run_id)
            if record:
                data = record.to_dict()
                last = data.get('last_step') or {}
                data['last_loss'] = last.get('total')
                runs.append(data)
        except Exception as e:
            print(f"Error loading run {run_id}: {e}")

    runs.sort(key=lambda x: x.get('created_at', ''), reverse=True)
    return runs


def loss_curve(record: RunRecord):
    """Per-step total and term values, for the detail page."""
    return {
        'steps': [s['step'] for s in record.steps],
        'total': [s['total'] for s in record.steps],
        'terms': {name: [s.get(name) for s in record.steps] for name in TERMS},
    }


@app.route('/')
def index():
    """Redirect to runs page."""
    return redirect(url_for('runs'))


@app.route('/runs')
def runs():
    """Runs page."""
    return render_template('runs.html', runs=get_all_runs())


@app.route('/runs/<run_id>')
def run_detail(run_id):
    """Run detail page."""
    record = RunRecord.load(run_id)
    if not record:
        return f"Run not found: {run_id}", 404
    return render_template('run_detail.html', run=record.to_dict(), steps=record.steps[-50:],
                           terms=TERMS, curve=loss_curve(record))


@app.route('/api/runs')
def api_runs():
    """API endpoint for runs."""
    return jsonify(get_all_runs())


@app.route('/api/runs/<run_id>')
def api_run_detail(run_id):
    """API endpoint for run detail."""
    record = RunRecord.load(run_id)
    if not record:
        return jsonify({'error': 'Run not found'}), 404
    data = record.to_dict()
    data['curve'] = loss_curve(record)
    return jsonify(data)


if __name__ == '__main__':
    app.run(debug=True, host='127.0.0.1', port=5001)

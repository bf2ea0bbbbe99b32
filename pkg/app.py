import os
import time
import logging
import threading
from flask import Flask, jsonify, request
from werkzeug.exceptions import BadRequest
from dotenv import load_dotenv
from cli import execute
from config import load_settings
from errors import LabError, InputError, EXIT_OK, EXIT_CHECK_FAILED, EXIT_INPUT, EXIT_SOLVER
from market import market_from_dict
from stability_lab import PerturbationSchedule

# Load environment variables
load_dotenv()

# Set up logging
logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

# Configuration
MAX_BODY_SIZE = 5 * 1024 * 1024  # 5MB max request body
MAX_RUN_LOG = 200
SERVER_PORT = int(os.getenv('LAB_PORT', '8000'))

# HTTP status per exit code
STATUS_BY_EXIT = {
    EXIT_OK: 200,
    EXIT_CHECK_FAILED: 422,
    EXIT_INPUT: 400,
    EXIT_SOLVER: 500,
}

# Flat request fields accepted per command
REQUEST_FIELDS = ("kind", "depth", "branching", "vol", "lam", "x", "y", "positivity", "oracle",
                  "decay", "sigma_level", "eps", "extra", "cesaro", "shadow",
                  "delta", "m", "eps_low", "paths", "grid_points")

# Initialize Flask
app = Flask(__name__)
app.config['MAX_CONTENT_LENGTH'] = MAX_BODY_SIZE

# Global variables
run_lock = threading.Lock()
run_log = []
server_start_time = time.time()


def record_run(command, exit_code):
    """Append a run to the in-memory log."""
    with run_lock:
        run_log.append({"command": command, "exit_code": exit_code, "timestamp": time.time()})
        del run_log[:-MAX_RUN_LOG]


def request_settings(data):
    """Resolve settings from the request body, the environment and defaults."""
    return load_settings(
        tol=data.get('tol'),
        max_iter=data.get('max_iter'),
        seed=data.get('seed'),
        parallel=data.get('parallel'),
        utility=data.get('utility'),
    )


def run_command(command, needs_market=True, needs_schedule=False, fixed=None):
    """Shared handler: parse the body, run the command, map the exit code to HTTP."""
    try:
        data = request.get_json(force=True, silent=False) or {}
    except BadRequest:
        return jsonify({"error": "Invalid request, body must be JSON"}), 400
    if not isinstance(data, dict):
        return jsonify({"error": "Invalid request, body must be a JSON object"}), 400
    try:
        settings = request_settings(data)
        params = {k: data[k] for k in REQUEST_FIELDS if k in data}
        params.update(fixed or {})
        if needs_market:
            if 'market' not in data:
                raise InputError("Invalid request, 'market' field required")
            params['market'] = market_from_dict(data['market'])
        if needs_schedule:
            if not isinstance(data.get('schedule'), dict):
                raise InputError("Invalid request, 'schedule' object required")
            params['schedule'] = PerturbationSchedule.from_dict(data['schedule'])
        report, _ = execute(command, params, settings)
    except (LabError, ValueError, TypeError) as e:
        logger.error(f"Error handling {command}: {e}")
        code = e.exit_code if isinstance(e, LabError) else EXIT_INPUT
        record_run(command, code)
        return jsonify({"error": str(e)}), STATUS_BY_EXIT[code]
    record_run(command, report["exit_code"])
    return jsonify(report), STATUS_BY_EXIT.get(report["exit_code"], 500)


@app.route('/api/status')
def status():
    """API endpoint to get the server status."""
    settings = load_settings()
    with run_lock:
        runs = len(run_log)
    return jsonify({
        "status": "running",
        "uptime": time.time() - server_start_time,
        "runs": runs,
        "settings": settings.to_dict(),
    })


@app.route('/api/runs')
def runs():
    """API endpoint to list recent runs."""
    with run_lock:
        return jsonify({"runs": list(run_log)})


@app.route('/api/gen_tree', methods=['POST'])
def gen_tree():
    """API endpoint to generate a market."""
    return run_command('gen-tree', needs_market=False)


@app.route('/api/solve_primal', methods=['POST'])
def solve_primal():
    """API endpoint to solve the primal problem."""
    return run_command('solve-primal')


@app.route('/api/solve_dual', methods=['POST'])
def solve_dual():
    """API endpoint to solve the dual problem."""
    return run_command('solve-dual')


@app.route('/api/verify_duality', methods=['POST'])
def verify_duality():
    """API endpoint to run the duality checks."""
    return run_command('verify-duality')


@app.route('/api/shadow', methods=['POST'])
def shadow():
    """API endpoint to extract and verify a shadow price."""
    return run_command('shadow')


@app.route('/api/sandwich', methods=['POST'])
def sandwich():
    """API endpoint to check compensator bounds of the optimal deflator."""
    return run_command('sandwich')


@app.route('/api/static_stability', methods=['POST'])
def static_stability():
    """API endpoint to run a static perturbation schedule."""
    return run_command('stability', needs_schedule=True, fixed={"mode": "static"})


@app.route('/api/dynamic_stability', methods=['POST'])
def dynamic_stability():
    """API endpoint to average perturbed optimal dual processes."""
    return run_command('stability', needs_schedule=True, fixed={"mode": "dynamic"})


@app.route('/api/counterexample', methods=['POST'])
def counterexample():
    """API endpoint to run the path simulation."""
    return run_command('counterexample', needs_market=False)


if __name__ == '__main__':
    logger.info("Lab server starting...")
    logger.info(f"Send JSON requests to http://localhost:{SERVER_PORT}/api/...")
    app.run(host='0.0.0.0', port=SERVER_PORT, debug=False)

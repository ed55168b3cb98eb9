"""Scripted protocol worker for executor tests.

usage: worker.py MODE [LOG]

echo       any terminal step returns metric 0.5
sleep      every step sleeps 2 s before answering
nometric   terminal steps omit the metric
wrongid    replies carry the wrong req_id
badhello   answers the handshake with garbage
toy        simulated time; metric is the sum of hyperparameter `x` over the
           run's steps; each terminal metric is appended to LOG
"""
import json
import sys
import time

mode = sys.argv[1]
log_path = sys.argv[2] if len(sys.argv) > 2 else None
handles = {"input": 0.0}
counter = 0


def send(frame):
    sys.stdout.write(json.dumps(frame) + "\n")
    sys.stdout.flush()


for line in sys.stdin:
    frame = json.loads(line)
    kind = frame["type"]
    if kind == "hello":
        if mode == "badhello":
            sys.stdout.write("not json\n")
            sys.stdout.flush()
            continue
        send({"type": "hello_ok", "time_mode": "simulated" if mode == "toy" else "wall"})
    elif kind == "shutdown":
        break
    elif kind == "run_step":
        req_id = frame["req_id"]
        if mode == "sleep":
            time.sleep(2.0)
        if mode == "wrongid":
            req_id += 1
        if frame["algorithm"] == "bad":
            send({"type": "step_err", "req_id": req_id, "message": "refusing bad"})
            continue
        parent = handles.get(frame["input_handle"])
        if parent is None:
            send({"type": "step_err", "req_id": req_id, "message": "unknown handle"})
            continue
        value = parent + float(frame["hyperparams"].get("x", 0.0))
        counter += 1
        token = "h%d" % counter
        handles[token] = value
        metric = None
        if frame["is_last"] and mode != "nometric":
            metric = 0.5 if mode == "echo" else value
            if log_path:
                with open(log_path, "a") as f:
                    f.write(repr(metric) + "\n")
        send({"type": "step_ok", "req_id": req_id, "output_handle": token,
              "seconds": 0.25 if mode == "toy" else 0.001, "metric": metric})

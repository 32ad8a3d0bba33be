import json

from utils import _json_serialize, dump_json, log


class BaseMonitor(object):

    def __init__(self, f=None, dest: str = None):
        self.data = []
        self.f = f or 100
        self.dest = dest

    def run(self, step, state):
        raise NotImplementedError

    def dump(self):
        pass


class TraceMonitor(BaseMonitor):
    """Keeps (step, objective, grad_norm, lr) every `f` optimizer steps."""

    def run(self, step, state):
        if step % self.f == 0:
            self.data.append({'step': step, **state})

    def dump(self):
        if self.dest is None:
            print(json.dumps(self.data, indent=1, default=_json_serialize))
            return
        dump_json(self.data, self.dest)


class LogMonitor(BaseMonitor):

    def __init__(self, f=None, dest: str = None, prefix=""):
        super().__init__(f, dest)
        self.prefix = prefix

    def run(self, step, state):
        if step % self.f == 0:
            log(f"{self.prefix}step {step:5d} objective {state['objective']:.4f} "
                f"|g| {state['grad_norm']:.3g} lr {state['lr']:.5f}", logfile=self.dest)

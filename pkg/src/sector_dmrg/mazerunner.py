"""Batched producer-consumer runtime with homogeneous worker threads.

Workers ("maze-runners") have no fixed role.  Within a batch every worker
first tries to explore the maze (an iterable of tasks); a worker that finds
the maze occupied or exhausted transitions to consuming buffered tasks
instead of idling.  The batch completes when the maze is exhausted, the
buffer is drained and no task is in flight, which is the only barrier.
Consumers may feed new tasks back into the running batch, giving a
recursive, self-feeding executor where tasks, not threads, carry the
recursion level.

Failures are isolated: a raising task is recorded in the batch statistics
and the remaining tasks still run.
"""

import threading
import time
from collections import deque
from dataclasses import dataclass, field


class MazeRunnerError(Exception):
    pass


class DepthLimitError(MazeRunnerError):
    """A task tried to spawn beyond the generation-depth guard."""


class BatchError(MazeRunnerError):
    def __init__(self, stats):
        super().__init__(f"{len(stats.errors)} task(s) failed in batch")
        self.stats = stats


@dataclass
class Task:
    """Unit of work: ``fn(ctx)`` run once; the result is routed to ``key``."""

    fn: object
    key: object = None
    cost: float = None
    depth: int = 0


def _as_task(item):
    return item if isinstance(item, Task) else Task(fn=item)


@dataclass
class BatchStats:
    tasks_found: int = 0
    tasks_executed: int = 0
    wall_seconds: float = 0.0
    errors: list = field(default_factory=list)


class KeyedSink:
    """Keyed accumulator with per-key mutual exclusion.

    ``combine`` merges a new result into the stored value; the default is
    addition, so distinct keys make batch outcomes order-independent.
    """

    def __init__(self, combine=None):
        self.combine = combine or (lambda acc, v: acc + v)
        self.values = {}
        self._guard = threading.Lock()
        self._locks = {}

    def lock_for(self, key):
        with self._guard:
            lock = self._locks.get(key)
            if lock is None:
                lock = self._locks[key] = threading.Lock()
            return lock

    def add(self, key, value):
        with self.lock_for(key):
            if key in self.values:
                self.values[key] = self.combine(self.values[key], value)
            else:
                self.values[key] = value


class TaskContext:
    """Execution context handed to every task."""

    def __init__(self, worker_id, workspace, batch, task):
        self.worker_id = worker_id
        self.workspace = workspace
        self._batch = batch
        self._task = task

    @property
    def depth(self):
        return self._task.depth

    def spawn(self, item):
        """Feed a new task into the current batch (a finding in the maze)."""
        child = _as_task(item)
        child.depth = self._task.depth + 1
        if child.depth > self._batch.depth_limit:
            raise DepthLimitError(
                f"spawn at depth {child.depth} exceeds guard "
                f"{self._batch.depth_limit}")
        self._batch.push(child)


class _Batch:
    def __init__(self, maze, depth_limit):
        self.maze_iter = iter(maze)
        self.maze_lock = threading.Lock()
        self.maze_done = False
        self.depth_limit = depth_limit
        self.cond = threading.Condition()
        self.buffer = deque()
        self.found = 0
        self.executed = 0
        self.in_flight = 0
        self.errors = []

    def push(self, task):
        with self.cond:
            self.found += 1
            self.buffer.append(task)
            self.cond.notify()

    def explore(self, blocking):
        """Pull one task from the maze.  Returns 'found', 'busy' or 'done'."""
        if self.maze_done:
            return "done"
        if not self.maze_lock.acquire(blocking=blocking):
            return "busy"
        try:
            if self.maze_done:
                return "done"
            try:
                item = next(self.maze_iter)
            except StopIteration:
                self.maze_done = True
                with self.cond:
                    self.cond.notify_all()
                return "done"
        finally:
            self.maze_lock.release()
        self.push(_as_task(item))
        return "found"

    def pop(self, wait):
        with self.cond:
            while True:
                if self.buffer:
                    self.in_flight += 1
                    return self.buffer.popleft()
                if self.maze_done and self.in_flight == 0:
                    self.cond.notify_all()
                    return None
                if not wait:
                    return None
                self.cond.wait(timeout=0.05)

    def finish(self, task, error):
        with self.cond:
            self.executed += 1
            self.in_flight -= 1
            if error is not None:
                self.errors.append((task, error))
            if self.maze_done and not self.buffer and self.in_flight == 0:
                self.cond.notify_all()


class RunnerPool:
    """Homogeneous thread pool running one batch of independent tasks at a time."""

    def __init__(self, workers=1, depth_limit=64):
        if workers < 1:
            raise ValueError("worker count must be positive")
        self.workers = workers
        self.depth_limit = depth_limit
        self._active = threading.Lock()

    def run_batch(self, maze, sink=None, workspaces=None):
        """Discover every task of ``maze``, execute each exactly once.

        ``workspaces`` optionally provides one per-worker resource object,
        reachable from tasks as ``ctx.workspace``.
        """
        with self._active:
            batch = _Batch(maze, self.depth_limit)
            t0 = time.perf_counter()
            if self.workers == 1:
                self._serial(batch, sink, workspaces[0] if workspaces else None)
            else:
                threads = [
                    threading.Thread(
                        target=self._worker,
                        args=(batch, sink, i,
                              workspaces[i] if workspaces else None),
                        name=f"maze-runner-{i}")
                    for i in range(self.workers)
                ]
                for t in threads:
                    t.start()
                for t in threads:
                    t.join()
            return BatchStats(batch.found, batch.executed,
                              time.perf_counter() - t0, batch.errors)

    def _execute(self, batch, sink, task, worker_id, workspace):
        error = None
        try:
            result = task.fn(TaskContext(worker_id, workspace, batch, task))
            if sink is not None and task.key is not None:
                sink.add(task.key, result)
        except Exception as exc:
            error = exc
        finally:
            batch.finish(task, error)

    def _serial(self, batch, sink, workspace):
        while batch.explore(blocking=True) == "found":
            pass
        while True:
            task = batch.pop(wait=False)
            if task is None:
                break
            self._execute(batch, sink, task, 0, workspace)

    def _worker(self, batch, sink, worker_id, workspace):
        while True:
            status = batch.explore(blocking=False)
            if status == "found":
                continue
            if status == "busy":
                # someone is inside the maze: solve gathered tasks meanwhile
                task = batch.pop(wait=False)
                if task is not None:
                    self._execute(batch, sink, task, worker_id, workspace)
                else:
                    time.sleep(0.0005)
                continue
            task = batch.pop(wait=True)
            if task is None:
                return
            self._execute(batch, sink, task, worker_id, workspace)

    def run_iterative(self, mazes, sink=None, workspaces=None):
        """Run mazes strictly in sequence, each with full pool parallelism.

        Maze ``i`` may depend on everything batch ``i-1`` produced.  The first
        batch with failures raises after it has drained.
        """
        all_stats = []
        for maze in mazes:
            stats = self.run_batch(maze, sink, workspaces)
            all_stats.append(stats)
            if stats.errors:
                raise BatchError(stats)
        return all_stats


def recursive_feed(pool, root, sink=None, workspaces=None):
    """Run a self-feeding batch seeded with a single task-producing task.

    All transitively spawned tasks execute within the same batch; a spawn
    beyond the pool's depth guard fails that task and raises after the batch
    drains, with partial statistics attached.
    """
    stats = pool.run_batch([_as_task(root)], sink, workspaces)
    if any(isinstance(err, DepthLimitError) for _, err in stats.errors):
        exc = BatchError(stats)
        raise exc
    return stats

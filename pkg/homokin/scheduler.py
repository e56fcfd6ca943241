import logging
import queue
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime
from threading import Thread
from typing import Callable, List, Optional, Sequence, TypeVar

from homokin.models import ExperimentConfig, RunManifest

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def run_parallel(fn: Callable[[T], R], items: Sequence[T], max_workers: int = 1) -> List[R]:
    """并行执行独立成员，结果按提交顺序返回"""
    if max_workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(fn, items))


class RunScheduler:
    def __init__(self, storage, runner: Callable[[ExperimentConfig, str], RunManifest], poll_interval: float = 0.5):
        self.storage = storage
        self.runner = runner
        self.poll_interval = poll_interval
        self.queue: "queue.Queue" = queue.Queue()
        self.running = False
        self.thread: Optional[Thread] = None

    def start(self):
        """启动后台运行线程"""
        if self.running:
            return
        self.running = True
        self.thread = Thread(target=self._run, daemon=True)
        self.thread.start()
        logger.info("Run scheduler started")

    def stop(self):
        """停止后台运行线程"""
        self.running = False
        if self.thread is not None:
            self.thread.join(timeout=5 * self.poll_interval)
        logger.info("Run scheduler stopped")

    def submit(self, config: ExperimentConfig, manifest: RunManifest) -> str:
        """登记并排队一个运行"""
        manifest.status = "queued"
        self.storage.save_manifest(manifest)
        self.queue.put((config, manifest.run_id))
        logger.info(f"Queued run {manifest.run_id}")
        return manifest.run_id

    def _run(self):
        """后台主循环"""
        while self.running:
            try:
                config, run_id = self.queue.get(timeout=self.poll_interval)
            except queue.Empty:
                continue
            try:
                self._execute(config, run_id)
            finally:
                self.queue.task_done()

    def _execute(self, config: ExperimentConfig, run_id: str):
        manifest = self.storage.load_manifest(run_id)
        if manifest is not None:
            manifest.status = "running"
            manifest.started_at = datetime.now().isoformat()
            self.storage.save_manifest(manifest)
        try:
            self.runner(config, run_id)
        except Exception as e:
            logger.error(f"Run {run_id} failed: {e}")
            manifest = self.storage.load_manifest(run_id) or manifest
            if manifest is not None:
                manifest.status = "failed"
                manifest.error = str(e)
                manifest.finished_at = datetime.now().isoformat()
                self.storage.save_manifest(manifest)

    def wait(self):
        """阻塞直到队列中的运行全部完成"""
        self.queue.join()


scheduler = None


def init_scheduler(storage, runner):
    """初始化调度器"""
    global scheduler
    scheduler = RunScheduler(storage, runner)
    return scheduler

# extensions.py
import logging
import logging.config
import os
from concurrent.futures import ThreadPoolExecutor


class FoldExecutor:
    """Runs independent cross-validation folds, merging results by fold index."""

    def __init__(self, jobs=1):
        self.jobs = jobs

    def init_app(self, app):
        self.jobs = max(1, int(app.config.get('JOBS', 1)))

    def map(self, fn, folds):
        folds = list(folds)
        if self.jobs <= 1 or len(folds) <= 1:
            results = [fn(fold) for fold in folds]
        else:
            with ThreadPoolExecutor(max_workers=self.jobs) as pool:
                results = list(pool.map(fn, folds))
        return [result for _, result in sorted(zip(folds, results), key=lambda item: item[0])]


class LogSetup:
    """Configures the logging tree once per process from logging.ini or a level."""

    def __init__(self):
        self.configured_from = None

    def init_app(self, app):
        path = app.config.get('LOG_CONFIG') or ''
        if path and os.path.exists(path):
            logging.config.fileConfig(path, disable_existing_loggers=False)
            self.configured_from = path
        else:
            level = getattr(logging, str(app.config.get('LOG_LEVEL', 'INFO')).upper(), logging.INFO)
            logging.getLogger().setLevel(level)
            if not logging.getLogger().handlers:
                logging.basicConfig(level=level,
                                    format='%(levelname)-5.5s [%(name)s] %(message)s')
            self.configured_from = 'level'


executor = FoldExecutor()
log_setup = LogSetup()

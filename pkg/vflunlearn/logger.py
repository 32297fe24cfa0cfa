import logging
import os


class Logger:
    train = logging.getLogger("vflunlearn.train")
    unlearn = logging.getLogger("vflunlearn.unlearn")
    harness = logging.getLogger("vflunlearn.harness")

    @classmethod
    def setup_logger(cls, base_path: str, level: str = "INFO"):
        """
        Attaches a file handler to each of the three loggers:
        - train: federated rounds, local epochs and aggregation.
        - unlearn: gradient ascent epochs, projection and early stopping.
        - harness: experiment arms, phase timings and artifacts.

        Logs are written to different files for each logger:
        - train.log
        - unlearn.log
        - harness.log

        Calling it again (e.g. for a second run in the same process) moves the
        handlers to the new directory instead of stacking them.

        Args:
            base_path (str): The directory where log files will be stored.
            level (str): Log level name, e.g. "INFO" or "DEBUG".
        """
        if not os.path.exists(base_path):
            os.makedirs(base_path)

        cls.train = cls._setup_logger("train", base_path, "train.log", level)
        cls.unlearn = cls._setup_logger("unlearn", base_path, "unlearn.log", level)
        cls.harness = cls._setup_logger("harness", base_path, "harness.log", level)

        cls.harness.info("Logger setup completed")

    @staticmethod
    def _setup_logger(
        name: str, base_path: str, log_file: str, level: str
    ) -> logging.Logger:
        """
        Helper function to set up the logger with the provided name and log file.

        Args:
            name (str): The short name of the logger ("train", "unlearn", "harness").
            base_path (str): The directory where the log file should be saved.
            log_file (str): The file to write the logs to.
            level (str): Log level name.

        Returns:
            logging.Logger: The configured logger.
        """
        logger = logging.getLogger(f"vflunlearn.{name}")
        logger.setLevel(level)

        for handler in list(logger.handlers):
            if isinstance(handler, logging.FileHandler):
                logger.removeHandler(handler)
                handler.close()

        file_path = os.path.join(base_path, log_file)
        file_handler = logging.FileHandler(file_path)
        file_handler.setLevel(level)

        formatter = logging.Formatter(
            "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
        )
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)

        return logger

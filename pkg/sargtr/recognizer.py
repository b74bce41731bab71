import logging
import os
import pathlib
from typing import Callable, List, Optional, Union

from .asc_graph import build_graph, record_to_centers
from .checkpoint import load_checkpoint, save_checkpoint
from .encodings import eigendecompose_symmetric, epe_closed_form, gne, normalized_laplacian
from .exceptions import CheckpointException
from .layers import ModelConfig, ModelParams
from .schema import DatasetRecord, EpochMetrics, EvalResult, Prediction
from .training import Dataset, TrainConfig, evaluate, predict, train

logger = logging.getLogger(__name__)


class Recognizer():
    '''
    Initialize the Recognizer class.

    Args:
        model_config (ModelConfig, optional): The architecture. Defaults to ModelConfig().
        params (ModelParams, optional): Trained parameters matching model_config.
        checkpoint (str, optional): Checkpoint to load. If not set, it will check if `SARGTR_CHECKPOINT`
                                    exists in the env and the file is present.
    '''
    def __init__(self, model_config: ModelConfig = None, params: ModelParams = None, checkpoint: str = None):
        self.model_config = model_config or ModelConfig()
        self.params = params
        self.history: List[EpochMetrics] = []

        if checkpoint is None and params is None:
            checkpoint = os.getenv("SARGTR_CHECKPOINT")
            if checkpoint and not pathlib.Path(checkpoint).is_file():
                logger.warning("SARGTR_CHECKPOINT points at a missing file %s, starting untrained.", checkpoint)
                checkpoint = None
        if checkpoint:
            self.model_config, self.params = load_checkpoint(checkpoint)
            logger.info("Recognizer loaded from %s.", checkpoint)

    def is_trained(self) -> bool:
        '''
        Check if the recognizer has parameters.

        Returns:
            bool: True if trained or loaded, False otherwise
        '''
        return self.params is not None

    def _require_trained(self):
        if not self.is_trained():
            raise CheckpointException("The recognizer has no parameters. Call fit() or load a checkpoint first.")

    def fit(self, dataset: Dataset, train_config: TrainConfig = None, val_dataset: Dataset = None,
            on_epoch: Callable[[EpochMetrics], None] = None) -> List[EpochMetrics]:
        '''
        Train from scratch on the dataset.

        The stored config is replaced by the trained one, which carries the ablation
        switches and the fitted standardization statistics.

        Args:
            dataset: The training records
            train_config (TrainConfig, optional): Optimizer settings, defaults to TrainConfig()
            val_dataset (optional): Records scored after every epoch
            on_epoch (callable, optional): Receives each epoch's metrics

        Returns:
            list of EpochMetrics: The per-epoch history
        '''
        if self.is_trained():
            logger.warning("Recognizer already trained; retraining from a fresh initialization.")
        result = train(dataset, self.model_config, train_config or TrainConfig(), val_dataset, on_epoch)
        self.model_config, self.params, self.history = result.config, result.params, result.history
        return self.history

    def predict(self, dataset: Dataset) -> Prediction:
        '''
        Classify records.

        Args:
            dataset: Records or prepared graphs; labels are ignored

        Returns:
            Prediction: labels and class probabilities per record
        '''
        self._require_trained()
        return predict(dataset, self.model_config, self.params)

    def evaluate(self, dataset: Dataset) -> EvalResult:
        '''
        Score labeled records.

        Returns:
            EvalResult: PCC, confusion matrix and record count
        '''
        self._require_trained()
        return evaluate(dataset, self.model_config, self.params)

    def encode(self, record: DatasetRecord, drop_degenerate: bool = False) -> dict:
        '''
        Structural encodings of one record under this recognizer's graph settings.

        Args:
            record (DatasetRecord): The record to encode
            drop_degenerate (bool, optional): Zero GNE columns of repeated eigenvalues and sign-ambiguous columns

        Returns:
            dict: edges, weights, sigma_d, Laplacian eigenvalues, gne and closed-form epe as plain lists
        '''
        graph = build_graph(record_to_centers(record), self.model_config.sigma_d)
        spectrum = eigendecompose_symmetric(normalized_laplacian(graph, weighted=self.model_config.gne_weighted))
        encoding = gne(graph, self.model_config.gne_n, weighted=self.model_config.gne_weighted,
                       drop_degenerate=drop_degenerate)
        logger.info("Encoded K=%d record: %d edges, sigma_d %.6g", graph.num_nodes, graph.num_edges, graph.sigma_d)
        return {"edges": graph.edges.tolist(), "weights": graph.weights.tolist(),
                "sigma_d": graph.sigma_d, "eigenvalues": spectrum.eigenvalues.tolist(),
                "gne": encoding.tolist(), "epe": epe_closed_form(graph).tolist()}

    def save(self, path: Union[str, pathlib.Path]):
        '''
        Write the config and parameters to a checkpoint file.

        Args:
            path (str): Destination file
        '''
        self._require_trained()
        save_checkpoint(path, self.model_config, self.params)

    @classmethod
    def load(cls, path: Union[str, pathlib.Path]) -> "Recognizer":
        '''
        Create a recognizer from a checkpoint file.

        Args:
            path (str): Checkpoint written by save()

        Returns:
            Recognizer: the loaded recognizer
        '''
        config, params = load_checkpoint(path)
        return cls(config, params)

    def parameter_count(self) -> Optional[int]:
        return self.params.count() if self.is_trained() else None

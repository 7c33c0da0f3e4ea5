"""Physics-informed low-rank augmentation for incomplete forward models.

Inverts a point-pressure-source deformation model from daily GNSS
displacement fields by pairing the physical decoder with a learnable
low-rank residual, plus a hybrid-VAE baseline for comparison.

Typical library use::

    from pila import gnssdata, trainer

    dataset = gnssdata.generate(gnssdata.default_scenario())
    result = trainer.train(dataset, trainer.TrainConfig(rank=4))
    evaluation = trainer.evaluate(result.checkpoint, dataset)
    print(evaluation.metrics)
"""

__version__ = "0.1.0"

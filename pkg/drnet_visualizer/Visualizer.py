import matplotlib
import matplotlib.pyplot as plt
import numpy as np

from drnet.evaluation import NUM_CLASSES, EvalReport
from drnet.training import History


def visualize_confusion(report: EvalReport, title='Confusion matrix', normalize=False, ax=None):
    """
    Takes an evaluation report and renders its confusion matrix as a heat map

    Args:
            report (EvalReport): The report whose matrix is rendered
            title (string): Title of the plot. Defaults to 'Confusion matrix'.
            normalize (Bool): Set to `True` to show per-row fractions instead of counts.
                              Defaults to `False`.
            ax (matplotlib.axes.Axes): Axes to draw on. Defaults to a new figure.

    Returns:
            matplotlib.figure.Figure: The figure holding the plot
    """
    counts = report.matrix.counts.astype(np.float64)
    if normalize:
        support = counts.sum(axis=1, keepdims=True)
        counts = np.divide(counts, support, out=np.zeros_like(counts), where=support > 0)
    if ax is None:
        _, ax = plt.subplots(figsize=(5, 4.5))
    image = ax.imshow(counts, cmap='Blues')
    ax.figure.colorbar(image, ax=ax)
    ticks = range(NUM_CLASSES)
    ax.set_xticks(ticks)
    ax.set_yticks(ticks)
    ax.set_xlabel('Predicted stage')
    ax.set_ylabel('True stage')
    ax.set_title(title)
    threshold = counts.max() / 2 if counts.size else 0
    for t in ticks:
        for p in ticks:
            text = f'{counts[t, p]:.2f}' if normalize else f'{int(counts[t, p])}'
            ax.text(p, t, text, ha='center', va='center', fontsize=8,
                    color='white' if counts[t, p] > threshold else 'black')
    return ax.figure


def visualize_history(history: History, title='Training'):
    """
    Takes a training history and plots accuracy, loss and learning rate per epoch

    Args:
            history (History): The record returned by `drnet.training.fit`
            title (string): Title of the figure. Defaults to 'Training'.

    Returns:
            matplotlib.figure.Figure: The figure holding the plots
    """
    fig, (acc_ax, loss_ax, lr_ax) = plt.subplots(1, 3, figsize=(13, 3.8))
    epochs = list(history.epoch)
    acc_epochs, train_acc, val_acc = epochs, history.train_acc, history.val_acc
    if history.initial_val_acc is not None:
        acc_epochs = [0] + epochs
        val_acc = [history.initial_val_acc] + list(val_acc)
    acc_ax.plot(epochs, train_acc, label='train')
    acc_ax.plot(acc_epochs, val_acc, label='validation')
    acc_ax.set_ylabel('accuracy')
    loss_ax.plot(epochs, history.train_loss, label='train')
    loss_ax.plot(epochs, history.val_loss, label='validation')
    loss_ax.set_ylabel('loss')
    lr_ax.plot(epochs, history.lr)
    lr_ax.set_yscale('log')
    lr_ax.set_ylabel('learning rate')
    for ax in (acc_ax, loss_ax, lr_ax):
        ax.set_xlabel('epoch')
    acc_ax.legend()
    loss_ax.legend()
    fig.suptitle(title)
    fig.tight_layout()
    return fig


def save_figure(fig, path):
    fig.savefig(path, dpi=120)
    plt.close(fig)


def use_headless_backend():
    matplotlib.use('Agg')

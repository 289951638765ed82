/* Minimal C client: maps a few values, scores predictions, reports errors. */
#include <stdio.h>
#include "cdae.h"

int main(void) {
    double x[3] = {0.0, 0.5, 1.0};
    double y[3];
    if (cdae_logistic_map(x, y, 3, 3.99) != CDAE_STATUS_OK) return 1;
    printf("map %.4f %.4f %.4f\n", y[0], y[1], y[2]);

    CdaeConfusion *cm = NULL;
    size_t truth[4] = {0, 1, 1, 2};
    size_t pred[4] = {0, 1, 2, 2};
    double acc = 0.0, f1 = 0.0;
    if (cdae_confusion_new(3, &cm) != CDAE_STATUS_OK) return 1;
    if (cdae_confusion_update(cm, truth, pred, 4) != CDAE_STATUS_OK) return 1;
    cdae_confusion_accuracy(cm, &acc);
    cdae_confusion_macro_f1(cm, &f1);
    printf("accuracy %.4f macro_f1 %.4f\n", acc, f1);
    cdae_confusion_free(cm);

    double bad = 3.0;
    CdaeStatus s = cdae_logistic_map(&bad, y, 1, 3.99);
    printf("status %d: %s\n", (int)s, cdae_last_error());
    return s == CDAE_STATUS_INVALID_ARGUMENT ? 0 : 1;
}

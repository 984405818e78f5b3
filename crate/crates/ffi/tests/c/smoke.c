#include <stdio.h>
#include <string.h>
#include "rgpt.h"

int main(void) {
    double scores[4] = {0.1, 0.4, 0.35, 0.8};
    uint8_t labels[4] = {0, 0, 1, 1};
    double auc = 0.0;
    if (rgpt_auroc(scores, labels, 4, &auc) != RGPT_STATUS_OK) return 1;
    if (auc < 0.7499 || auc > 0.7501) return 2;

    RgptConfig *cfg = NULL;
    if (rgpt_config_new(&cfg) != RGPT_STATUS_OK) return 3;
    if (rgpt_config_set(cfg, "missing_type", "sideways") != RGPT_STATUS_CONFIG_ERROR) return 4;
    if (strlen(rgpt_last_error_message()) == 0) return 5;
    rgpt_config_free(cfg);

    RgptMemoryBank *bank = NULL;
    if (rgpt_memory_load("/nonexistent", &bank) != RGPT_STATUS_IO_ERROR) return 6;
    printf("rgpt %s ok\n", rgpt_version());
    return 0;
}

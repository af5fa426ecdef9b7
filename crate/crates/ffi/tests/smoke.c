#include <stdio.h>
#include <string.h>
#include "gcdlab.h"

int main(void) {
    GcdConfig *cfg = NULL;
    if (gcd_config_preset(0, "runs", 1, &cfg) != GCD_STATUS_OK) return 1;
    size_t need = 0;
    if (gcd_config_hash(cfg, NULL, 0, &need) != GCD_STATUS_BUFFER_TOO_SMALL) return 2;
    char hash[128];
    if (need > sizeof hash || gcd_config_hash(cfg, hash, sizeof hash, NULL) != GCD_STATUS_OK) return 3;
    gcd_config_free(cfg);

    GcdCascade *c = NULL;
    if (gcd_cascade_load("/nonexistent.json", &c) != GCD_STATUS_MISSING_ARTIFACT) return 4;
    char msg[512];
    gcd_last_error_message(msg, sizeof msg);
    if (strstr(msg, "train-diffusion") == NULL) return 5;

    double real[6] = {0, 0, 1, 0, 0, 1}, fid = -1;
    if (gcd_fid(real, 3, real, 3, 2, &fid) != GCD_STATUS_OK || fid > 1e-9) return 6;
    printf("%s %s\n", gcd_version(), hash);
    return 0;
}

/* Builds a small network, predicts on a blank image and checks dice. */
#include <stdio.h>
#include <string.h>

#include "cineseg.h"

int main(void) {
    CsegNetwork *net = NULL;
    const char *cfg = "depth = 1\nbase_channels = 4\ninput_height = 16\ninput_width = 16\n";
    if (cseg_network_new(cfg, 7, &net) != CSEG_STATUS_OK) {
        fprintf(stderr, "new: %s\n", cseg_last_error());
        return 1;
    }
    size_t ih, iw, oh, ow;
    cseg_network_shape(net, &ih, &iw, &oh, &ow);

    double pixels[16 * 16];
    for (size_t i = 0; i < 16 * 16; i++) pixels[i] = (i % 7) / 7.0;
    uint8_t mask[16 * 16];
    if (cseg_network_predict(net, pixels, 1, ih, iw, 0.5, mask, sizeof mask) != CSEG_STATUS_OK) {
        fprintf(stderr, "predict: %s\n", cseg_last_error());
        return 1;
    }
    double d = 0.0;
    cseg_dice(mask, mask, oh, ow, &d);

    uint8_t small[4];
    CsegStatus s = cseg_network_predict(net, pixels, 1, ih, iw, 0.5, small, 4);
    printf("%s dice=%.1f out=%zux%zu small=%d msg=%s\n", cseg_version(), d, oh, ow, (int)s,
           strlen(cseg_last_error()) > 0 ? "set" : "empty");
    cseg_network_free(net);
    return 0;
}

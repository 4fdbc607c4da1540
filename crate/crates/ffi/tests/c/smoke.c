#include <stdio.h>
#include <stdlib.h>

#include "gedi.h"

static int check(GediStatus s, const char *what) {
  if (s != GEDI_STATUS_OK) {
    const char *msg = gedi_last_error();
    fprintf(stderr, "%s: status %d: %s\n", what, (int)s, msg ? msg : "(none)");
    exit(10 + (int)s);
  }
  return 0;
}

int main(int argc, char **argv) {
  if (argc != 3) {
    fprintf(stderr, "usage: smoke BASE GUIDE\n");
    return 2;
  }
  GediModel *base = NULL, *guide = NULL;
  GediConfig *config = NULL;
  check(gedi_model_load(argv[1], &base), "load base");
  check(gedi_model_load(argv[2], &guide), "load guide");
  check(gedi_config_new("paper-default", &config), "config");
  check(gedi_config_set_max_new_tokens(config, 10), "max tokens");

  size_t prompt[4], n = 0;
  check(gedi_model_encode(guide, "A A", prompt, 4, &n), "encode");

  size_t out[16], len = 0;
  check(gedi_generate(base, guide, config, 1, prompt, n, out, 16, &len), "generate");
  char text[64];
  size_t bytes = 0;
  check(gedi_model_decode(guide, out, len, text, sizeof text, &bytes), "decode");
  printf("guided %s\n", text);

  size_t cls = 0;
  double post[2];
  check(gedi_classify(guide, out, len, &cls, post, 2), "classify");
  printf("class %zu\n", cls);

  if (gedi_model_load("/nonexistent/x.ckpt", &base) != GEDI_STATUS_DATA || base != NULL) {
    fprintf(stderr, "missing file not reported\n");
    return 3;
  }
  printf("error %s\n", gedi_last_error() ? "set" : "unset");

  gedi_config_free(config);
  gedi_model_free(guide);
  return 0;
}

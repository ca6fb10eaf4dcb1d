#include <stdio.h>
#include "metaverify.h"

int main(int argc, char **argv) {
    if (argc != 2) {
        fprintf(stderr, "usage: smoke SCENARIO\n");
        return 1;
    }
    MvScenario *sc = NULL;
    if (mv_scenario_load(argv[1], &sc) != MV_STATUS_OK) {
        fprintf(stderr, "load: %s\n", mv_last_error_message());
        return 1;
    }
    MvRunOptions opts = mv_run_options_default();
    MvResult *res = NULL;
    MvStatus st = mv_run(sc, &opts, &res);
    if (st != MV_STATUS_OK) {
        fprintf(stderr, "run: %d %s\n", (int)st, mv_last_error_message());
        mv_scenario_free(sc);
        return 1;
    }
    printf("%s\n", mv_result_answer_json(res));
    printf("verify_calls=%llu\n", (unsigned long long)mv_result_verify_calls(res));
    mv_result_free(res);
    mv_scenario_free(sc);
    return 0;
}

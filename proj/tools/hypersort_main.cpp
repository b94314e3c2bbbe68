#include "hypersort/cli.hpp"

int main(int argc, char** argv) { return hypersort::cli_run(argc, argv); }

#include "fflab/cli.hpp"

int main(int argc, char** argv) { return fflab::run_cli(argc, argv); }

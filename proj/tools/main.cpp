#include "dstfuse/cli.hpp"

int main(int argc, char** argv) { return dstfuse::run_cli(argc, argv); }

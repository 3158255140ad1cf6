#include "relabund/cli.hpp"

int main(int argc, char** argv) { return relabund::cli::run(argc, argv); }

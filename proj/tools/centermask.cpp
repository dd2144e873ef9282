#include "centermask/cli.hpp"

int main(int argc, char** argv) { return centermask::cli::run(argc, argv); }

#include "kgmod/cli.hpp"

int main(int argc, char** argv) { return kgmod::cli::run(argc, argv); }

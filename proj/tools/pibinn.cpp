#include "pibinn/cli.hpp"

int main(int argc, char** argv) { return pibinn::cli::run(argc, argv); }

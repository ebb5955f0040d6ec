#include "tfpca/cli.hpp"

int main(int argc, char** argv) { return tfpca::cli::run(argc, argv); }

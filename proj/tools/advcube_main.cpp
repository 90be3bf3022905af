#include "advcube/cli.hpp"

int main(int argc, char** argv) { return advcube::cli::run(argc, argv); }

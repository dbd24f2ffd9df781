#include "eiglab/cli.hpp"

int main(int argc, char** argv) { return eiglab::cli::dispatch(argc, argv); }

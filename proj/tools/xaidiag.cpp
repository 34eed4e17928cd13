#include "xaidiag/pipeline.hpp"

int main(int argc, char** argv) { return xaidiag::cli_main(argc, argv); }

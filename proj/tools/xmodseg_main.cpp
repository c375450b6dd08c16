#include "xmodseg/cli.hpp"

int main(int argc, char** argv) { return xmodseg::cli::run(argc, argv); }

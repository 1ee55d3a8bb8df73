#include "cstalk/cli.hpp"

int main(int argc, char** argv) { return cstalk::cli::run(argc, argv); }

#include "semiq/cli.h"

int main(int argc, char** argv) { return semiq::cli::main(argc, argv); }

#include <iostream>

int main() {
  std::cout << "l2aot cli placeholder\n";
  return 0;
}

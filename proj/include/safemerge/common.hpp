#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace safemerge {

// Validation failures (bad arguments, malformed inputs, broken invariants).
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Filesystem / serialization failures.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Token ids are the interface; there is no text tokenizer.
using TokenSeq = std::vector<int>;

namespace tokens {
// Reserved special tokens. Vocabularies must have room for all of them,
// payload tokens start at kReserved.
inline constexpr int kEos = 0;
inline constexpr int kRefusal = 1;
inline constexpr int kComply = 2;
inline constexpr int kOp = 3;      // infix operator in arithmetic questions
inline constexpr int kUnsafe = 4;  // marks a forbidden question
inline constexpr int kReserved = 8;

inline int payload(int value) { return kReserved + value; }
}  // namespace tokens

}  // namespace safemerge

/*
 * Copyright (c) 2026, The fp8rl Authors. All rights reserved.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

// Character-level tokenizer and the two programmatic-reward tasks: k-digit
// addition ("12+7=" -> "19") and letter-sequence reversal ("abc>" -> "cba").
// Answers end with EOS; the reward is 1 only for an exact match.

#include <cstdint>
#include <random>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "fp8rl/error.hpp"
#include "fp8rl/model.hpp"

namespace fp8rl {

namespace vocab {
inline constexpr Token kPad = 0;
inline constexpr Token kEos = 1;
inline constexpr Token kDigit0 = 2;
inline constexpr Token kPlus = 12;
inline constexpr Token kEquals = 13;
inline constexpr Token kReverse = 14;
inline constexpr Token kLetterA = 15;
inline constexpr std::size_t kLetters = 9;
inline constexpr std::size_t kSize = 24;
}  // namespace vocab

inline Token encode_char(char c) {
  if (c >= '0' && c <= '9') return vocab::kDigit0 + (c - '0');
  if (c == '+') return vocab::kPlus;
  if (c == '=') return vocab::kEquals;
  if (c == '>') return vocab::kReverse;
  if (c >= 'a' && c < static_cast<char>('a' + vocab::kLetters)) return vocab::kLetterA + (c - 'a');
  throw ConfigError(std::string("tokenizer: unsupported character '") + c + "'");
}

inline std::vector<Token> encode_text(std::string_view s) {
  std::vector<Token> out;
  for (char c : s) out.push_back(encode_char(c));
  return out;
}

// '$' stands for EOS and '_' for PAD; anything out of range renders as '?'.
inline std::string decode_tokens(std::span<const Token> toks) {
  std::string s;
  for (Token t : toks) {
    if (t == vocab::kPad) s += '_';
    else if (t == vocab::kEos) s += '$';
    else if (t >= vocab::kDigit0 && t < vocab::kDigit0 + 10) s += static_cast<char>('0' + (t - vocab::kDigit0));
    else if (t == vocab::kPlus) s += '+';
    else if (t == vocab::kEquals) s += '=';
    else if (t == vocab::kReverse) s += '>';
    else if (t >= vocab::kLetterA && t < static_cast<Token>(vocab::kLetterA + vocab::kLetters))
      s += static_cast<char>('a' + (t - vocab::kLetterA));
    else s += '?';
  }
  return s;
}

struct Problem {
  std::vector<Token> prompt;
  std::vector<Token> answer;  // ends with EOS
};

enum class TaskKind { kAddition, kReversal };

struct TaskSpec {
  TaskKind kind = TaskKind::kAddition;
  std::size_t digits = 2;  // operand digits (addition) or string length (reversal)
  std::size_t min_digits = 1;  // operands/strings are drawn with length in [min_digits, digits]

  void validate() const {
    if (digits == 0 || digits > 9) throw ConfigError("task.digits must be in [1, 9]");
    if (min_digits == 0 || min_digits > digits) throw ConfigError("task.min_digits must be in [1, task.digits]");
  }
  // Longest prompt and answer (with EOS) the task can produce.
  std::size_t max_prompt_len() const { return kind == TaskKind::kAddition ? 2 * digits + 2 : digits + 1; }
  std::size_t max_answer_len() const { return kind == TaskKind::kAddition ? digits + 2 : digits + 1; }
};

inline Problem make_problem(const TaskSpec& spec, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> len(spec.min_digits, spec.digits);
  Problem p;
  if (spec.kind == TaskKind::kAddition) {
    auto operand = [&] {
      const std::size_t n = len(rng);
      std::uint64_t lo = 1, hi = 10;
      for (std::size_t i = 1; i < n; ++i) lo *= 10, hi *= 10;
      if (n == 1) lo = 0;
      return std::uniform_int_distribution<std::uint64_t>(lo, hi - 1)(rng);
    };
    const std::uint64_t a = operand(), b = operand();
    p.prompt = encode_text(std::to_string(a) + "+" + std::to_string(b) + "=");
    p.answer = encode_text(std::to_string(a + b));
  } else {
    const std::size_t n = len(rng);
    std::string s;
    for (std::size_t i = 0; i < n; ++i) s += static_cast<char>('a' + rng() % vocab::kLetters);
    p.prompt = encode_text(s + ">");
    p.answer = encode_text(std::string(s.rbegin(), s.rend()));
  }
  p.answer.push_back(vocab::kEos);
  return p;
}

inline double reward(const Problem& p, std::span<const Token> response) {
  return std::equal(response.begin(), response.end(), p.answer.begin(), p.answer.end()) ? 1.0 : 0.0;
}

// Training prompts are drawn from the task distribution with a fixed
// held-out validation set removed.
class ProblemSource {
 public:
  ProblemSource(const TaskSpec& spec, std::uint64_t seed, std::size_t n_validation) : spec_(spec) {
    spec.validate();
    std::mt19937_64 rng(seed ^ 0x5eed'7a11'da7aULL);
    for (std::size_t tries = 0; validation_.size() < n_validation; ++tries) {
      if (tries > 100 * n_validation + 1000) throw ConfigError("task: too few distinct problems for the validation set");
      Problem p = make_problem(spec, rng);
      if (held_out_.insert(p.prompt).second) validation_.push_back(std::move(p));
    }
  }

  const std::vector<Problem>& validation() const { return validation_; }
  const TaskSpec& spec() const { return spec_; }

  std::vector<Problem> draw(std::size_t n, std::mt19937_64& rng) const {
    std::vector<Problem> out;
    for (std::size_t tries = 0; out.size() < n; ++tries) {
      if (tries > 1000 * n + 1000) throw ConfigError("task: training distribution exhausted by the validation set");
      Problem p = make_problem(spec_, rng);
      if (!held_out_.count(p.prompt)) out.push_back(std::move(p));
    }
    return out;
  }

 private:
  TaskSpec spec_;
  std::vector<Problem> validation_;
  std::set<std::vector<Token>> held_out_;
};

}  // namespace fp8rl

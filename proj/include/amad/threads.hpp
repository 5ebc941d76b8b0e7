#pragma once

#include <condition_variable>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace amad {

// Worker count: AMAD_THREADS caps it, hardware concurrency is the default.
inline std::size_t max_threads() {
  static const std::size_t n = [] {
    std::size_t hw = std::thread::hardware_concurrency();
    if (hw == 0) hw = 1;
    if (const char* env = std::getenv("AMAD_THREADS")) {
      const long v = std::atol(env);
      if (v >= 1 && static_cast<std::size_t>(v) < hw) hw = static_cast<std::size_t>(v);
    }
    return hw;
  }();
  return n;
}

namespace detail {

// Minimal persistent pool: parallel_for hands each worker one contiguous
// chunk of the index range. Each index is processed by exactly one thread
// and every per-index reduction stays sequential, so results do not depend
// on the worker count.
class ThreadPool {
 public:
  static ThreadPool& instance() {
    static ThreadPool pool(max_threads());
    return pool;
  }

  void run(std::size_t n, const std::function<void(std::size_t, std::size_t)>& chunk_fn) {
    const std::size_t workers = std::min(threads_.size() + 1, n);
    if (workers <= 1) {
      chunk_fn(0, n);
      return;
    }
    const std::size_t chunk = (n + workers - 1) / workers;
    {
      std::unique_lock<std::mutex> lock(mu_);
      task_ = &chunk_fn;
      task_n_ = n;
      task_chunk_ = chunk;
      task_workers_ = workers - 1;  // caller takes chunk 0
      pending_ = workers - 1;
      ++generation_;
      cv_start_.notify_all();
    }
    chunk_fn(0, std::min(chunk, n));
    std::unique_lock<std::mutex> lock(mu_);
    cv_done_.wait(lock, [this] { return pending_ == 0; });
    task_ = nullptr;
  }

  ~ThreadPool() {
    {
      std::unique_lock<std::mutex> lock(mu_);
      stop_ = true;
      cv_start_.notify_all();
    }
    for (auto& t : threads_) t.join();
  }

 private:
  explicit ThreadPool(std::size_t n_threads) {
    for (std::size_t i = 1; i < n_threads; ++i) {
      threads_.emplace_back([this, i] { worker(i); });
    }
  }

  void worker(std::size_t id) {
    std::uint64_t seen = 0;
    for (;;) {
      const std::function<void(std::size_t, std::size_t)>* task = nullptr;
      std::size_t begin = 0, end = 0;
      {
        std::unique_lock<std::mutex> lock(mu_);
        cv_start_.wait(lock, [&] { return stop_ || generation_ != seen; });
        if (stop_) return;
        seen = generation_;
        if (id <= task_workers_) {
          task = task_;
          begin = std::min(id * task_chunk_, task_n_);
          end = std::min(begin + task_chunk_, task_n_);
        }
      }
      if (task && begin < end) (*task)(begin, end);
      {
        std::unique_lock<std::mutex> lock(mu_);
        if (task) --pending_;
        if (pending_ == 0) cv_done_.notify_all();
      }
    }
  }

  std::vector<std::thread> threads_;
  std::mutex mu_;
  std::condition_variable cv_start_, cv_done_;
  const std::function<void(std::size_t, std::size_t)>* task_ = nullptr;
  std::size_t task_n_ = 0, task_chunk_ = 0, task_workers_ = 0, pending_ = 0;
  std::uint64_t generation_ = 0;
  bool stop_ = false;
};

}  // namespace detail

// Runs fn(i) for i in [0, n). Parallel only when the estimated work is
// worth the handoff; grain is in "fused loop iterations" chosen by callers.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t work_per_index, Fn&& fn) {
  constexpr std::size_t kMinWork = 1 << 16;
  if (n == 0) return;
  if (n * work_per_index < kMinWork || max_threads() <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const std::function<void(std::size_t, std::size_t)> chunk_fn =
      [&fn](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) fn(i);
      };
  detail::ThreadPool::instance().run(n, chunk_fn);
}

}  // namespace amad

#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <memory>
#include <mutex>
#include <thread>
#include <vector>

namespace unigen::core {

// Persistent worker pool for data-parallel loops. Work is split into indexed
// blocks pulled from an atomic counter; every block writes a disjoint output
// region, so results do not depend on which thread runs which block. Each
// dispatch owns its task state, so workers finishing late can never touch a
// newer dispatch.
class ThreadPool {
public:
    explicit ThreadPool(int n_threads) : n_threads_(n_threads < 1 ? 1 : n_threads) {
        for (int i = 0; i + 1 < n_threads_; ++i)
            workers_.emplace_back([this] { worker_loop(); });
    }

    ~ThreadPool() {
        {
            std::lock_guard<std::mutex> lk(mu_);
            stop_ = true;
        }
        cv_.notify_all();
        for (auto& w : workers_) w.join();
    }

    int size() const { return n_threads_; }

    // Runs fn(block) for block in [0, n_blocks). Blocks run on the calling
    // thread plus the workers; returns when all blocks are done. Nested calls
    // from inside a block degrade to serial execution.
    void parallel_for(int64_t n_blocks, const std::function<void(int64_t)>& fn) {
        if (n_blocks <= 0) return;
        if (n_blocks == 1 || n_threads_ == 1 || in_block()) {
            for (int64_t b = 0; b < n_blocks; ++b) fn(b);
            return;
        }
        auto task = std::make_shared<Task>();
        task->fn = &fn;
        task->total = n_blocks;
        {
            std::lock_guard<std::mutex> lk(mu_);
            current_ = task;
        }
        cv_.notify_all();
        run_blocks(*task);
        std::unique_lock<std::mutex> lk(task->mu);
        task->cv_done.wait(lk, [&] { return task->done.load(std::memory_order_acquire) >= task->total; });
        {
            std::lock_guard<std::mutex> lk2(mu_);
            if (current_ == task) current_.reset();
        }
    }

    static ThreadPool& global() {
        static ThreadPool pool(default_threads());
        return pool;
    }

    static int default_threads() {
        if (const char* env = std::getenv("UNIGEN_THREADS")) {
            int n = std::atoi(env);
            if (n > 0) return n;
        }
        unsigned hw = std::thread::hardware_concurrency();
        return hw ? static_cast<int>(hw) : 1;
    }

private:
    struct Task {
        const std::function<void(int64_t)>* fn = nullptr;
        int64_t total = 0;
        std::atomic<int64_t> next{0};
        std::atomic<int64_t> done{0};
        std::mutex mu;
        std::condition_variable cv_done;
    };

    static bool& in_block() {
        thread_local bool flag = false;
        return flag;
    }

    static void run_blocks(Task& task) {
        in_block() = true;
        for (;;) {
            const int64_t b = task.next.fetch_add(1, std::memory_order_relaxed);
            if (b >= task.total) break;
            (*task.fn)(b);
            if (task.done.fetch_add(1, std::memory_order_acq_rel) + 1 >= task.total) {
                std::lock_guard<std::mutex> lk(task.mu);
                task.cv_done.notify_all();
            }
        }
        in_block() = false;
    }

    void worker_loop() {
        std::shared_ptr<Task> last;
        for (;;) {
            std::shared_ptr<Task> task;
            {
                std::unique_lock<std::mutex> lk(mu_);
                cv_.wait(lk, [&] { return stop_ || (current_ && current_ != last); });
                if (stop_) return;
                task = current_;
            }
            last = task;
            run_blocks(*task);
        }
    }

    int n_threads_;
    std::vector<std::thread> workers_;
    std::mutex mu_;
    std::condition_variable cv_;
    std::shared_ptr<Task> current_;
    bool stop_ = false;
};

inline void parallel_for(int64_t n_blocks, const std::function<void(int64_t)>& fn) {
    ThreadPool::global().parallel_for(n_blocks, fn);
}

}  // namespace unigen::core
